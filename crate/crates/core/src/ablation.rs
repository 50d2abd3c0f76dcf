//! Training-based ablations: the stage-count sweep and the single-operator
//! baselines. Each row trains a fresh network on the training split and
//! scores it on the validation split.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{Dataset, SplitDataset};
use crate::model::{Network, NetworkConfig};
use crate::search_space::{op_registry, Architecture, CellSpec, OpKind, TaskKind};
use crate::task::Variant;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub k: usize,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedOpRow {
    /// Operator label, or `supernet` for the mixed cell.
    pub cell: String,
    pub scene_params: usize,
    pub total_params: usize,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,psnr_db,ssim,final_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.k, opt(r.psnr_db), opt(r.ssim), opt(r.final_loss)));
    }
    s
}

pub fn fixed_op_csv(rows: &[FixedOpRow]) -> String {
    let mut s = String::from("cell,scene_params,total_params,psnr_db,ssim\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cell,
            r.scene_params,
            r.total_params,
            opt(r.psnr_db),
            opt(r.ssim)
        ));
    }
    s
}

fn fit_and_score(mut net: Network, data: &SplitDataset, cfg: &TrainConfig, variant: Variant, seed: u64) -> Result<(Network, Option<f64>, Option<f64>, Option<f64>)> {
    let report = train(&mut net, &data.train, cfg, seed)?;
    let table = evaluate(&net, &Dataset { records: data.val.clone() }, variant)?;
    let last = report.curve.last().map(|p| p.loss);
    Ok((net, table.mean_psnr, table.mean_ssim, last))
}

/// One row per stage count, all sharing `arch`, the training budget and the
/// initialization seed.
pub fn ablate_k(
    data: &SplitDataset,
    net_cfg: &NetworkConfig,
    arch: &Architecture,
    cfg: &TrainConfig,
    k_list: &[usize],
    variant: Variant,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if k_list.is_empty() {
        return Err(Error::Config("empty stage-count list".into()));
    }
    k_list
        .iter()
        .map(|&k| {
            let mut c = net_cfg.clone();
            c.scene.stages = k;
            let net = Network::discrete(c, arch, seed)?;
            let (_, psnr_db, ssim, final_loss) = fit_and_score(net, data, cfg, variant, seed)?;
            Ok(AblationRow {
                k,
                psnr_db,
                ssim,
                final_loss,
            })
        })
        .collect()
}

/// Every low-level operator as a uniform cell in both modules, then the
/// mixed supernet with its logits left at initialization.
pub fn fixed_op_table(
    data: &SplitDataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<Vec<FixedOpRow>> {
    let ops: Vec<OpKind> = op_registry(TaskKind::LowTask);
    let edges = CellSpec::distillation(1).edges.len();
    let mut rows = Vec::with_capacity(ops.len() + 1);
    let candidates = ops.iter().map(|op| (op.label().to_string(), Some(*op)));
    for (label, op) in candidates.chain(std::iter::once(("supernet".to_string(), None))) {
        let net = match op {
            Some(op) => Network::discrete(net_cfg.clone(), &Architecture::uniform(op, edges), seed)?,
            None => Network::default_supernet(net_cfg.clone(), seed)?,
        };
        let (net, psnr_db, ssim, _) = fit_and_score(net, data, cfg, variant, seed)?;
        let size = net.size();
        rows.push(FixedOpRow {
            cell: label,
            scene_params: size.scene,
            total_params: size.scene + size.removal,
            psnr_db,
            ssim,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{synthetic_dataset, SynthParams};

    fn split() -> SplitDataset {
        let d = synthetic_dataset(4, 12, 12, 5, &SynthParams::default()).unwrap();
        SplitDataset::interleaved(&d).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 1, pretrain_epochs: 1, ..Default::default() }
    }

    #[test]
    fn single_k_gives_single_row_and_is_deterministic() {
        let arch = Architecture::uniform(OpKind::Conv3, 7);
        let run = || ablate_k(&split(), &NetworkConfig::default(), &arch, &quick(), &[1], Variant::Ruas, 3).unwrap();
        let rows = run();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k, 1);
        assert!(rows[0].psnr_db.is_some());
        assert_eq!(rows, run());
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(ablate_k(&split(), &NetworkConfig::default(), &arch, &quick(), &[], Variant::Ruas, 3).is_err());
    }

    #[test]
    fn fixed_op_table_has_every_operator_and_the_supernet() {
        let cfg = TrainConfig { epochs: 0, pretrain_epochs: 0, ..Default::default() };
        let rows = fixed_op_table(&split(), &NetworkConfig::default(), &cfg, Variant::Ruas, 1).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[7].cell, "supernet");
        let conv3 = rows.iter().find(|r| r.cell == "3-C").unwrap();
        assert_eq!(conv3.scene_params, 7 * 81 + 39);
        let skip = rows.iter().find(|r| r.cell == "SC").unwrap();
        assert_eq!(skip.scene_params, 39);
        assert!(rows[7].scene_params > conv3.scene_params);
        assert_eq!(fixed_op_csv(&rows).lines().count(), 9);
    }
}
