//! Library-level runs across module boundaries: search, derive, train,
//! checkpoint and inference.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ruas::autodiff::Graph;
use ruas::checkpoint;
use ruas::io::{synthetic_dataset, Dataset, SplitDataset, SynthParams};
use ruas::model::{Network, NetworkConfig};
use ruas::search::{run_search, SearchConfig, Strategy};
use ruas::task::Variant;
use ruas::tensor::{Shape, Tensor};
use ruas::train::{evaluate, train, TrainConfig};

fn tiny_split() -> SplitDataset {
    let d = synthetic_dataset(4, 12, 12, 9, &SynthParams::default()).unwrap();
    SplitDataset::interleaved(&d).unwrap()
}

#[test]
fn searched_network_trains_and_survives_a_checkpoint() {
    let split = tiny_split();
    let net_cfg = NetworkConfig::default();
    let search = SearchConfig { epochs: 1, strategy: Strategy::Cooperative, ..Default::default() };
    let outcome = run_search(&split, &net_cfg, &search, 4).unwrap();
    assert_eq!(outcome.alpha.architecture().unwrap(), outcome.architecture);

    let mut net = Network::discrete(net_cfg, &outcome.architecture, 4).unwrap();
    let cfg = TrainConfig { epochs: 2, pretrain_epochs: 1, ..Default::default() };
    let report = train(&mut net, &split.train, &cfg, 4).unwrap();
    assert!(report.curve.iter().all(|p| p.loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.architecture(), net.architecture());
    for v in Variant::ALL {
        let y = &split.val[0].input;
        assert_eq!(net.enhance(y, v).unwrap().data(), back.enhance(y, v).unwrap().data(), "{v:?}");
    }
    let val = Dataset { records: split.val.clone() };
    let a = evaluate(&net, &val, Variant::Ruas).unwrap();
    let b = evaluate(&back, &val, Variant::Ruas).unwrap();
    assert_eq!(a.mean_psnr, b.mean_psnr);
}

#[test]
fn supernets_cannot_be_checkpointed() {
    let net = Network::default_supernet(NetworkConfig::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(checkpoint::save(&net, &dir.path().join("s.ckpt")).is_err());
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Every stage brightens or keeps the input and inverts its illumination
    /// exactly wherever the illumination is off the clamp bounds.
    #[test]
    fn stages_brighten_and_invert_illumination(img_seed in any::<u64>(), net_seed in 0u64..1000, stages in 1usize..4) {
        let cfg = NetworkConfig { scene: ruas::scene::SceneConfig { stages, ..Default::default() }, ..Default::default() };
        let floor = cfg.scene.t_floor;
        let net = Network::default_supernet(cfg, net_seed).unwrap();
        let y_t = random_image(img_seed, 6, 7);
        let mut g = Graph::new();
        let y = g.constant(y_t.clone());
        let out = net.forward(&mut g, y, Variant::RuasS).unwrap();
        prop_assert_eq!(out.scene.trajectory.len(), stages);
        for &(u, t) in &out.scene.trajectory {
            let (u, t) = (g.value(u).data(), g.value(t).data());
            for ((&yv, &uv), &tv) in y_t.data().iter().zip(u).zip(t) {
                prop_assert!(uv >= yv);
                if tv > floor && tv < 1.0 {
                    prop_assert!((uv * tv - yv).abs() <= 1e-6);
                }
            }
        }
    }
}
