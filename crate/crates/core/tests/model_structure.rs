use std::collections::BTreeSet;

use eitl_core::caf::Caf;
use eitl_core::encoder::FeatureEnhance;
use eitl_core::noise::HpfBank;
use eitl_core::{Ctx, Graph, Model, ModelConfig, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn names(cfg: &ModelConfig) -> BTreeSet<String> {
    Model::new(cfg, 0).unwrap().store.names().map(String::from).collect()
}

fn pyramid(cfg: &ModelConfig, size: usize) {
    let mut model = Model::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
    let x = Tensor::uniform(&[1, 3, size, size], 0.0, 1.0, &mut rng);
    let g = Graph::new();
    let mut ctx = Ctx::new(&g, &mut model.store, false);
    let xv = g.constant(x);
    let t = model.network.forward(&mut ctx, xv).unwrap();
    for s in 0..4 {
        let side = size >> (s + 2);
        let c = cfg.embed_dims[s];
        assert_eq!(g.shape(t.rgb[s]), vec![1, c, side, side], "rgb stage {}", s + 1);
        assert_eq!(g.shape(t.noise[s]), vec![1, c, side, side], "noise stage {}", s + 1);
        assert_eq!(g.shape(t.fused[s]), vec![1, 2 * c, side, side], "fused stage {}", s + 1);
    }
    assert_eq!(g.shape(t.mask), vec![1, 1, size, size]);
    assert!(g.value(t.mask).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn tiny_pyramid_at_64_and_128() {
    pyramid(&ModelConfig::tiny(), 64);
    pyramid(&ModelConfig::tiny(), 128);
}

#[test]
fn desk_pyramid_at_64_and_128() {
    pyramid(&ModelConfig::desk(), 64);
    pyramid(&ModelConfig::desk(), 128);
}

#[test]
fn zeroed_feature_enhancement_scales_by_three_halves() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let fe = FeatureEnhance::new(&mut store, "fe", &cfg, &mut rng);
    fe.zero_output_layers(&mut store);
    let x = Tensor::randn(&[2, cfg.embed_dims[2], 4, 4], 1.0, &mut rng);
    for training in [true, false] {
        let g = Graph::new();
        let mut ctx = Ctx::new(&g, &mut store, training);
        let xv = g.constant(x.clone());
        let y = fe.forward(&mut ctx, xv).unwrap();
        let want = x.map(|v| 1.5 * v);
        assert!(g.value(y).bit_eq(&want), "training={training}");
    }
}

#[test]
fn zeroed_caf_decoders_scale_by_one_quarter() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let caf = Caf::new(&mut store, "caf", 16, 8, &mut rng);
    caf.zero_decoders(&mut store);
    let a = Tensor::randn(&[2, 8, 6, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 8, 6, 5], 1.0, &mut rng);
    let g = Graph::new();
    let mut ctx = Ctx::new(&g, &mut store, true);
    let (av, bv) = (g.constant(a), g.constant(b));
    let tr = caf.trace(&mut ctx, av, bv).unwrap();
    let want = g.value(tr.zcat).map(|v| 0.25 * v);
    assert!(g.value(tr.out).bit_eq(&want));
    assert_eq!(g.shape(tr.mh), vec![2, 16, 6, 1]);
    assert_eq!(g.shape(tr.mw), vec![2, 16, 1, 5]);
}

#[test]
fn caf_rejects_mismatched_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let caf = Caf::new(&mut store, "caf", 8, 8, &mut rng);
    let g = Graph::new();
    let mut ctx = Ctx::new(&g, &mut store, false);
    let a = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let b = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
    assert!(caf.forward(&mut ctx, a, b).is_err());
}

#[test]
fn branches_share_no_parameters() {
    let all = names(&ModelConfig::tiny());
    let strip =
        |p: &str| -> BTreeSet<String> { all.iter().filter_map(|n| n.strip_prefix(p).map(String::from)).collect() };
    let (rgb, noise) = (strip("rgb."), strip("noise."));
    assert!(!rgb.is_empty());
    // Same architecture, separate tensors.
    assert_eq!(rgb, noise);
    let model = Model::new(&ModelConfig::tiny(), 0).unwrap();
    let w_rgb = model.store.by_name("rgb.block1.0.attn.q.weight").unwrap();
    let w_noise = model.store.by_name("noise.block1.0.attn.q.weight").unwrap();
    assert!(!w_rgb.bit_eq(w_noise));
}

#[test]
fn ablations_differ_only_by_module_names() {
    let full = ModelConfig::tiny();
    let no_fe = ModelConfig {
        use_fe: false,
        ..full.clone()
    };
    let base = ModelConfig {
        use_caf: false,
        ..no_fe.clone()
    };
    let (nf, nn, nb) = (names(&full), names(&no_fe), names(&base));
    let fe_only: BTreeSet<_> = nf.difference(&nn).cloned().collect();
    let caf_only: BTreeSet<_> = nn.difference(&nb).cloned().collect();
    assert!(nn.is_subset(&nf) && nb.is_subset(&nn));
    assert!(
        !fe_only.is_empty()
            && fe_only
                .iter()
                .all(|n| n.starts_with("rgb.fe.") || n.starts_with("noise.fe."))
    );
    assert!(!caf_only.is_empty() && caf_only.iter().all(|n| n.starts_with("caf")));
    assert!(nb.iter().all(|n| !n.contains(".fe.") && !n.starts_with("caf")));
}

#[test]
fn eval_mode_is_deterministic_and_input_checked() {
    let mut model = Model::new(&ModelConfig::tiny(), 5).unwrap();
    let x = Tensor::full(&[2, 3, 32, 32], 0.3);
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert!(a.bit_eq(&b));
    let err = model.predict(&Tensor::zeros(&[1, 3, 48, 48])).unwrap_err();
    assert!(err.to_string().contains("pad or resize"));
}

#[test]
fn hpf_channels_are_independent() {
    let bank = HpfBank::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::uniform(&[1, 3, 12, 12], 0.0, 1.0, &mut rng);
    let base = bank.apply(&x).unwrap();
    assert_eq!(base.shape(), &[1, 9, 12, 12]);
    for c in 0..3 {
        let mut y = x.clone();
        for v in &mut y.data_mut()[c * 144..(c + 1) * 144] {
            *v = 1.0 - *v;
        }
        let out = bank.apply(&y).unwrap();
        for oc in 0..9 {
            let same = base.narrow(1, oc, 1).unwrap().bit_eq(&out.narrow(1, oc, 1).unwrap());
            assert_eq!(same, oc % 3 != c, "input channel {c}, output channel {oc}");
        }
    }
}
