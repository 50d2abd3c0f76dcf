//! Subcommand bodies. Each one resolves the run configuration, echoes it to
//! `run_config.json` and writes its artifacts into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;

use ruas::ablation::{ablate_k as run_ablate_k, ablation_csv, fixed_op_csv, fixed_op_table};
use ruas::autodiff::Graph;
use ruas::checkpoint;
use ruas::diagnostics::{gradient_suite, to_csv as gradcheck_csv};
use ruas::io::{load_png, save_png, write_synthetic, Dataset, ImageRecord, SynthParams};
use ruas::model::{config_hash, Network};
use ruas::scene::WarmStart;
use ruas::search::{compare_strategies as run_compare, run_search, Strategy, StrategyRow};
use ruas::search_space::{dot_dump, Architecture, Cell, SearchedAlpha};
use ruas::task::Variant;
use ruas::tensor::Tensor;
use ruas::train::{evaluate, train as run_train, TrainStrategy};
use ruas::{Error, Result};

use crate::config::{resolve_seed, RunConfig, SEED_ENV};
use crate::{Common, DataArg};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the config, applies overrides, resolves the seed and echoes the
/// effective configuration.
fn prepare(common: &Common, data: Option<&DataArg>) -> Result<(RunConfig, u64)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(dir) = data.and_then(|d| d.data.clone()) {
        cfg.data.dir = Some(dir);
    }
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(common.seed, env.as_deref(), cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.validate()?;
    cfg.write(&common.out)?;
    info!("seed {seed}, output {}", common.out.display());
    Ok((cfg, seed))
}

fn read_alpha(path: &Path) -> Result<SearchedAlpha> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn architecture(cfg: &RunConfig, alpha: Option<&Path>) -> Result<Architecture> {
    match (alpha, &cfg.architecture) {
        (Some(p), _) => read_alpha(p)?.architecture(),
        (None, Some(a)) => Ok(a.clone()),
        (None, None) => Err(Error::Config(
            "no architecture: pass --alpha or set `architecture` in the config".into(),
        )),
    }
}

fn edges(cell: &Cell) -> Vec<(usize, usize)> {
    cell.spec.edges.iter().map(|e| (e.src, e.dst)).collect()
}

pub fn search(common: &Common, data: &DataArg, strategy: Option<&str>) -> Result<()> {
    let (mut cfg, seed) = prepare(common, Some(data))?;
    if let Some(s) = strategy {
        cfg.search.strategy = Strategy::from_str(s)?;
        cfg.write(&common.out)?;
    }
    let split = cfg.split()?;
    info!("{} search on {} train / {} val images", cfg.search.strategy, split.train.len(), split.val.len());
    let start = Instant::now();
    let out = run_search(&split, &cfg.network(), &cfg.search, seed)?;
    info!("search finished in {:.1}s: {}", start.elapsed().as_secs_f64(), out.architecture.compact());

    let alpha_path = common.out.join("alpha_final.json");
    let json = serde_json::to_string_pretty(&out.alpha).map_err(|e| Error::io(&alpha_path, e))?;
    write(&alpha_path, &(json + "\n"))?;
    write(&common.out.join("history.csv"), &out.history.to_csv())?;
    let net = &out.network;
    let mut dot = dot_dump("scene", &edges(&net.scene_cell), &out.alpha.scene)?;
    dot.push_str(&dot_dump("task", &edges(&net.denoiser.cell), &out.alpha.task)?);
    write(&common.out.join("arch.dot"), &dot)
}

pub fn train(common: &Common, data: &DataArg, strategy: Option<&str>, alpha: Option<&Path>) -> Result<()> {
    let (mut cfg, seed) = prepare(common, Some(data))?;
    if let Some(s) = strategy {
        cfg.train.strategy = TrainStrategy::from_str(s)?;
    }
    let arch = architecture(&cfg, alpha)?;
    cfg.architecture = Some(arch.clone());
    cfg.write(&common.out)?;
    let split = cfg.split()?;
    let mut net = Network::discrete(cfg.network(), &arch, seed)?;
    info!("{} training of {}", cfg.train.strategy, arch.compact());
    let report = run_train(&mut net, &split.train, &cfg.train, seed)?;
    checkpoint::save(&net, &common.out.join("model.ckpt"))?;
    write(&common.out.join("curve.csv"), &report.to_csv())?;
    let val = evaluate(&net, &Dataset { records: split.val.clone() }, Variant::Ruas)?;
    if let (Some(p), Some(s)) = (val.mean_psnr, val.mean_ssim) {
        info!("validation: PSNR {p:.3} dB, SSIM {s:.4}");
    }
    Ok(())
}

/// Inputs for `enhance`: one PNG, or every PNG of a directory.
fn enhance_inputs(input: &Path) -> Result<Vec<ImageRecord>> {
    if input.is_dir() {
        return Ok(Dataset::load_dir(input)?.records);
    }
    let id = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::io(input, "cannot derive an image id from the path"))?;
    Ok(vec![ImageRecord::in_memory(id, load_png(input)?, None)])
}

fn load_model(model: &Path, cfg: Option<&RunConfig>) -> Result<Network> {
    let net = checkpoint::load(model)?;
    if let Some(cfg) = cfg {
        let expected = config_hash(&cfg.network(), &net.architecture());
        let found = net.config_hash();
        if expected != found {
            return Err(Error::Config(format!(
                "checkpoint {} has config hash {found}, the run configuration hashes to {expected}",
                model.display()
            )));
        }
    }
    Ok(net)
}

fn scaled_by_max(t: &Tensor) -> Tensor {
    let max = t.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        t.map(|v| v.abs() / max)
    } else {
        t.clone()
    }
}

pub fn enhance(
    common: &Common,
    model: &Path,
    input: &Path,
    variant: Variant,
    dump_stages: bool,
    warm_start: Option<WarmStart>,
) -> Result<()> {
    let (cfg, _) = prepare(common, None)?;
    let mut net = load_model(model, common.config.as_ref().map(|_| &cfg))?;
    if let Some(w) = warm_start {
        net.config.scene.warm_start = w;
    }
    let records = enhance_inputs(input)?;
    info!("enhancing {} image(s) with {variant:?}", records.len());
    for rec in &records {
        let mut g = Graph::new();
        let y = g.constant(rec.input.clone());
        let out = net.forward(&mut g, y, variant)?;
        let x = g.value(out.x).map(|v| v.clamp(0.0, 1.0));
        save_png(&x, &common.out.join(format!("{}.png", rec.id)))?;
        if dump_stages {
            let dir = common.out.join(&rec.id);
            for (k, (u, t)) in out.scene.trajectory.iter().enumerate() {
                save_png(g.value(*t), &dir.join(format!("stage{}_t.png", k + 1)))?;
                save_png(g.value(*u), &dir.join(format!("stage{}_u.png", k + 1)))?;
            }
            if let Some(theta) = out.theta {
                save_png(&scaled_by_max(g.value(theta)), &dir.join("noise_map.png"))?;
            }
        }
        if out.removal_skipped && variant == Variant::RuasA {
            info!("{}: noise below threshold, removal skipped", rec.id);
        }
    }
    Ok(())
}

pub fn eval(common: &Common, data: &DataArg, model: &Path, variant: Variant) -> Result<()> {
    let (cfg, _) = prepare(common, Some(data))?;
    let net = load_model(model, common.config.as_ref().map(|_| &cfg))?;
    let table = evaluate(&net, &cfg.dataset()?, variant)?;
    write(&common.out.join("metrics.csv"), &table.to_csv())?;
    match (table.mean_psnr, table.mean_ssim) {
        (Some(p), Some(s)) => info!("mean PSNR {p:.3} dB, SSIM {s:.4} over {} image(s)", table.rows.len()),
        _ => info!("no references found; metrics left empty"),
    }
    Ok(())
}

pub fn gradcheck(common: &Common) -> Result<()> {
    let (_, seed) = prepare(common, None)?;
    let rows = gradient_suite(seed)?;
    write(&common.out.join("gradcheck.csv"), &gradcheck_csv(&rows))?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    info!("{} of {} gradient checks passed", rows.len() - failed.len(), rows.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// `1,2,3` or an inclusive range `1..5`.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid stage-count list {text:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let ks: Vec<usize> = match text.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(bad());
            }
            (a..=b).collect()
        }
        None => text.split(',').map(num).collect::<Result<_>>()?,
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

pub fn ablate_k(common: &Common, data: &DataArg, k_list: &str, alpha: Option<&Path>, variant: Variant) -> Result<()> {
    let ks = parse_k_list(k_list)?;
    let (cfg, seed) = prepare(common, Some(data))?;
    let arch = architecture(&cfg, alpha)?;
    let rows = run_ablate_k(&cfg.split()?, &cfg.network(), &arch, &cfg.train, &ks, variant, seed)?;
    write(&common.out.join("ablation.csv"), &ablation_csv(&rows))
}

pub fn compare_strategies(common: &Common, data: &DataArg) -> Result<()> {
    let (cfg, seed) = prepare(common, Some(data))?;
    let (rows, outcomes) = run_compare(&cfg.split()?, &cfg.network(), &cfg.search, seed)?;
    let mut csv = String::from(StrategyRow::CSV_HEADER);
    csv.push('\n');
    for (row, out) in rows.iter().zip(&outcomes) {
        csv.push_str(&row.csv_line());
        csv.push('\n');
        write(&common.out.join(format!("history_{}.csv", row.strategy)), &out.history.to_csv())?;
        let alpha_path = common.out.join(format!("alpha_{}.json", row.strategy));
        let json = serde_json::to_string_pretty(&out.alpha).map_err(|e| Error::io(&alpha_path, e))?;
        write(&alpha_path, &(json + "\n"))?;
        info!("{}: combined {:.6e}, {}", row.strategy, row.combined, row.architecture);
    }
    write(&common.out.join("strategies.csv"), &csv)
}

pub fn fixed_op(common: &Common, data: &DataArg, variant: Variant) -> Result<()> {
    let (cfg, seed) = prepare(common, Some(data))?;
    let rows = fixed_op_table(&cfg.split()?, &cfg.network(), &cfg.train, variant, seed)?;
    write(&common.out.join("fixed_op.csv"), &fixed_op_csv(&rows))
}

pub fn synth(out: &PathBuf, count: usize, size: usize, seed: u64, noise_sigma: f64) -> Result<()> {
    if count < 2 || size == 0 {
        return Err(Error::Config("synth needs at least 2 images of positive size".into()));
    }
    let params = SynthParams { noise_sigma, ..Default::default() };
    params.validate()?;
    let data = write_synthetic(out, count, size, seed, &params)?;
    info!("wrote {} synthetic pairs to {}", data.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_list_forms() {
        assert_eq!(parse_k_list("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_k_list("2, 5").unwrap(), vec![2, 5]);
        for bad in ["", "3..1", "0,1", "a", "1.."] {
            assert!(matches!(parse_k_list(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
