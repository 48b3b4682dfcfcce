use eitl_core::data::{flip_h, resize_nearest};
use eitl_core::infer::{crop, pad_reflect};
use eitl_core::loss::{dice_loss, focal_loss, total_loss};
use eitl_core::metrics::{f1_iou, Counts};
use eitl_core::noise::HpfBank;
use eitl_core::train::{cosine_lr, Checkpoint};
use eitl_core::{Graph, LossConfig, Tensor};
use proptest::prelude::*;

fn mask(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), len)
}

fn probs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..0.999, len)
}

fn losses(p: &[f64], y: &[f64], cfg: &LossConfig) -> (f64, f64, f64) {
    let shape = [1, 1, 1, p.len()];
    let gt = Tensor::new(&shape, y.to_vec()).unwrap();
    let g = Graph::new();
    let pv = g.constant(Tensor::new(&shape, p.to_vec()).unwrap());
    let d = dice_loss(&g, pv, &gt, cfg).unwrap();
    let f = focal_loss(&g, pv, &gt, cfg).unwrap();
    let t = total_loss(&g, pv, &gt, cfg).unwrap();
    let v = |x| g.value(x).item();
    (v(d), v(f), v(t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f1_and_iou_satisfy_their_identity(pred in mask(64), gt in mask(64)) {
        let s = f1_iou("x", &pred, &gt, 0.5).unwrap();
        prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() <= 1e-12);
        prop_assert!(s.iou <= s.f1 && (0.0..=1.0).contains(&s.f1));
        let c = s.counts;
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, 64);
        let swapped = f1_iou("x", &gt, &pred, 0.5).unwrap();
        prop_assert_eq!(swapped.f1.to_bits(), s.f1.to_bits());
    }

    #[test]
    fn counts_match_a_pixel_loop(pred in probs(50), gt in mask(50), t in 0.05f64..0.95) {
        let c = Counts::from_masks(&pred, &gt, t).unwrap();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, y) in pred.iter().zip(&gt) {
            match (*p >= t, *y >= 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        prop_assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fn_));
    }

    #[test]
    fn losses_are_bounded_and_add_up(p in probs(40), y in mask(40)) {
        let cfg = LossConfig::default();
        let (d, f, t) = losses(&p, &y, &cfg);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(f >= 0.0);
        prop_assert_eq!(t.to_bits(), (d + f).to_bits());
    }

    #[test]
    fn focal_without_focusing_is_half_cross_entropy(p in probs(30), y in mask(30)) {
        let cfg = LossConfig { gamma: 0.0, ..LossConfig::default() };
        let (_, f, _) = losses(&p, &y, &cfg);
        let bce = p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / p.len() as f64;
        prop_assert!((f - 0.5 * bce).abs() <= 1e-12 * bce.max(1.0));
    }

    #[test]
    fn hpf_bank_is_zero_on_constants_and_linear(v in 0.0f64..1.0, a in probs(3 * 64), b in probs(3 * 64)) {
        let bank = HpfBank::default();
        let flat = bank.apply(&Tensor::full(&[1, 3, 8, 8], v)).unwrap();
        prop_assert!(flat.data().iter().all(|&r| r == 0.0));
        let (ta, tb) = (Tensor::new(&[1, 3, 8, 8], a.clone()).unwrap(), Tensor::new(&[1, 3, 8, 8], b.clone()).unwrap());
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ts = Tensor::new(&[1, 3, 8, 8], sum).unwrap();
        let (ra, rb, rs) = (bank.apply(&ta).unwrap(), bank.apply(&tb).unwrap(), bank.apply(&ts).unwrap());
        for i in 0..rs.numel() {
            prop_assert!((rs.data()[i] - ra.data()[i] - rb.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_schedule_stays_between_its_endpoints(total in 1usize..500, step in 0usize..800, lo in 0.0f64..1e-3, span in 0.0f64..1e-2) {
        let hi = lo + span;
        let lr = cosine_lr(step, total, hi, lo);
        prop_assert!(lr >= lo && lr <= hi);
        prop_assert!(cosine_lr(step + 1, total, hi, lo) <= lr);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(h in 1usize..9, w in 1usize..9, ph in 0usize..30, pw in 0usize..30, vals in probs(2 * 81)) {
        let t = Tensor::new(&[2, h, w], vals[..2 * h * w].to_vec()).unwrap();
        let p = pad_reflect(&t, h + ph, w + pw);
        prop_assert!(crop(&p, h, w).bit_eq(&t));
    }

    #[test]
    fn geometric_ops_keep_masks_binary(m in mask(100), oh in 1usize..25, ow in 1usize..25) {
        let t = Tensor::new(&[1, 10, 10], m).unwrap();
        prop_assert!(flip_h(&flip_h(&t)).bit_eq(&t));
        let r = resize_nearest(&t, oh, ow);
        prop_assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn checkpoint_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut framed = b"EITLCKPT".to_vec();
        framed.extend_from_slice(&bytes);
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
        let _ = Checkpoint::from_bytes(&framed);
    }
}

#[test]
fn focal_single_pixel_value() {
    let (_, f, _) = losses(&[0.9], &[1.0], &LossConfig::default());
    let want = 0.5 * 0.1f64.powi(2) * -(0.9f64.ln());
    assert!((f - want).abs() < 1e-15);
    assert!((f - 5.268e-4).abs() < 1e-7);
}
