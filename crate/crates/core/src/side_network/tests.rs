use super::*;
use crate::numerics::finite_difference_check;
use crate::quantizer::Rounding;
use crate::rng::stream;
use rand_distr::{Distribution, Normal};

fn shape(dim: usize, layers: usize) -> BackboneShape {
    BackboneShape {
        dim,
        seq_len: 4,
        layers,
        ffn_dim: 2 * dim,
    }
}

fn batch(bs: &BackboneShape, n: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = stream(seed, "batch");
    let dist = Normal::new(0.0, 1.0).unwrap();
    let x = DenseTensor::matrix(
        n * bs.seq_len,
        bs.dim,
        (0..n * bs.seq_len * bs.dim).map(|_| dist.sample(&mut rng)).collect(),
    )
    .unwrap();
    // label from the sign pattern of the first features of the pooled input
    let labels = (0..n)
        .map(|b| {
            let mut s = 0.0;
            for t in 0..bs.seq_len {
                s += x.get2(b * bs.seq_len + t, 0);
            }
            usize::from(s > 0.0) % classes
        })
        .collect();
    Batch { x, labels }
}

fn model(bs: BackboneShape, cfg: SideConfig, seed: u64) -> Model {
    let mut b = Backbone::init(bs, seed).unwrap();
    b.quantize(8, Rounding::Floor).unwrap();
    let side = SideNetwork::init(&bs, cfg, 2, seed).unwrap();
    Model::new(b, side).unwrap()
}

fn moe(n: usize) -> SideConfig {
    SideConfig {
        experts: n,
        top_k: 1,
        ..SideConfig::default()
    }
}

fn dense() -> SideConfig {
    SideConfig {
        ismoe: false,
        ..SideConfig::default()
    }
}

#[test]
fn hidden_width_is_floor_d_over_r() {
    for (d, r) in [(9, 2), (32, 2), (32, 3), (8, 8)] {
        let s = SideShape::new(&shape(d, 2), &SideConfig { reduction: r, ..moe(3) }, 2).unwrap();
        assert_eq!(s.hidden, d / r);
    }
}

fn closed_form(bs: &BackboneShape, cfg: &SideConfig, classes: usize) -> usize {
    let (dd, l) = (bs.dim, bs.layers);
    let d = dd / cfg.reduction;
    let f = bs.ffn_dim / cfg.reduction;
    let e = if cfg.ismoe { cfg.experts } else { 1 };
    let blocks = l - cfg.layer_drop.len();
    let expert = d * f + f + f * d + d;
    let routing = if cfg.ismoe { d * e + e + e * dd } else { 0 };
    let block = dd * d + d + 2 * d + e * expert + routing;
    let side = dd * d + d + blocks * block + d * classes + classes;
    let ln = if cfg.train_backbone_ln { l * 4 * dd } else { 0 };
    side + ln
}

#[test]
fn trainable_count_matches_closed_form() {
    let bs = shape(16, 3);
    for cfg in [moe(6), moe(3), dense(), SideConfig { layer_drop: vec![1], ..moe(4) }] {
        let m = model(bs, cfg.clone(), 0);
        assert_eq!(m.trainable_parameters().len(), closed_form(&bs, &cfg, 2));
        let names = m.trainable_names();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        assert!(names.iter().all(|n| !FROZEN_PARTS.iter().any(|p| n.ends_with(p) && n.starts_with("backbone"))));
    }
}

#[test]
fn three_more_experts_add_three_experts_worth() {
    let bs = shape(16, 3);
    let six = model(bs, moe(6), 0).trainable_parameters().len();
    let three = model(bs, moe(3), 0).trainable_parameters().len();
    let sh = SideShape::new(&bs, &moe(6), 2).unwrap();
    let per_block = 3 * (sh.expert_params() + sh.routing_params_per_expert());
    assert_eq!(six - three, bs.layers * per_block);
}

#[test]
fn freezing_everything_leaves_empty_view() {
    let cfg = SideConfig {
        train_backbone_ln: false,
        train_side: false,
        ..moe(3)
    };
    let m = model(shape(8, 2), cfg, 0);
    assert!(m.trainable_parameters().is_empty());
    assert!(m.trainable_names().is_empty());
}

#[test]
fn single_expert_matches_dense() {
    let bs = shape(8, 2);
    let mut a = model(bs, moe(1), 4);
    let mut b = model(bs, dense(), 4);
    let data = batch(&bs, 6, 2, 1);
    let la = a.logits(&data).unwrap();
    let lb = b.logits(&data).unwrap();
    for (x, y) in la.data().iter().zip(lb.data()) {
        assert!((x - y).abs() <= 1e-12);
    }
    let w = LossWeights::default();
    let mut oa = AdamW::new(AdamWConfig::default()).unwrap();
    let mut ob = AdamW::new(AdamWConfig::default()).unwrap();
    for step in 1..=10 {
        let sa = a.train_step(&data, &w, &mut oa, step).unwrap();
        let sb = b.train_step(&data, &w, &mut ob, step).unwrap();
        assert!((sa.loss.total - sb.loss.total).abs() <= 1e-12);
    }
}

#[test]
fn logits_are_deterministic() {
    let bs = BackboneShape {
        dim: 32,
        seq_len: 8,
        layers: 4,
        ffn_dim: 128,
    };
    let data = batch(&bs, 3, 2, 2);
    let a = model(bs, moe(6), 0).logits(&data).unwrap();
    let b = model(bs, moe(6), 0).logits(&data).unwrap();
    let bytes = |t: &DenseTensor| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn zero_ladder_ignores_backbone() {
    let bs = shape(8, 2);
    let data = batch(&bs, 4, 2, 3);
    let zero_ladders = |m: &mut Model| {
        for (n, t) in m.side.params_mut().iter_mut() {
            if n.contains("ladder") {
                *t = DenseTensor::zeros(t.shape());
            }
        }
    };
    let mut a = model(bs, dense(), 1);
    let mut b = model(bs, dense(), 1);
    b.backbone = Backbone::init(bs, 99).unwrap();
    zero_ladders(&mut a);
    zero_ladders(&mut b);
    assert_eq!(a.logits(&data).unwrap(), b.logits(&data).unwrap());
}

#[test]
fn frozen_weights_untouched_by_training() {
    let bs = shape(8, 2);
    let mut m = model(bs, moe(3), 0);
    let before: Vec<DenseTensor> = m.backbone.effective_weights().into_iter().map(|(_, t)| t.clone()).collect();
    let codes: Vec<_> = m.backbone.groups().iter().map(|g| g.quantized().clone()).collect();
    let data = batch(&bs, 5, 2, 0);
    let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
    for step in 1..=5 {
        m.train_step(&data, &LossWeights::default(), &mut opt, step).unwrap();
    }
    let after: Vec<DenseTensor> = m.backbone.effective_weights().into_iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(before, after);
    let codes_after: Vec<_> = m.backbone.groups().iter().map(|g| g.quantized().clone()).collect();
    assert_eq!(codes, codes_after);
}

#[test]
fn gradients_match_finite_differences() {
    let bs = BackboneShape {
        dim: 8,
        seq_len: 4,
        layers: 2,
        ffn_dim: 16,
    };
    let m = model(bs, moe(3), 7);
    let data = batch(&bs, 4, 2, 7);
    let w = LossWeights::default();
    let (_, grad) = m.loss_and_grad(&data, &w).unwrap();
    let params = m.trainable_parameters();
    let mut probe = m.clone();
    let err = finite_difference_check(
        |p| {
            probe.set_trainable_parameters(p).unwrap();
            probe.loss_and_grad(&data, &w).unwrap().0.total
        },
        &params,
        &grad,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn zero_beta_total_is_task() {
    let bs = shape(8, 2);
    let m = model(bs, moe(3), 0);
    let data = batch(&bs, 4, 2, 0);
    let (s, _) = m.evaluate(&data, &LossWeights { alpha: 1.0, beta: 0.0 }).unwrap();
    assert_eq!(s.total, s.task);
    assert!(s.balance > 0.0);
}

#[test]
fn training_loss_keeps_falling() {
    let bs = shape(8, 2);
    let mut m = model(bs, moe(3), 0);
    let data = batch(&bs, 32, 2, 5);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        ..AdamWConfig::default()
    })
    .unwrap();
    let losses: Vec<f64> = (1..=50)
        .map(|s| m.train_step(&data, &LossWeights::default(), &mut opt, s).unwrap().loss.total)
        .collect();
    for i in 0..losses.len() - 10 {
        assert!(losses[i + 10] < losses[i], "step {i}: {} -> {}", losses[i], losses[i + 10]);
    }
}

#[test]
fn empty_batch_rejected() {
    let bs = shape(8, 2);
    let m = model(bs, moe(3), 0);
    let empty = Batch {
        x: DenseTensor::zeros(&[0, 8]),
        labels: vec![],
    };
    assert!(m.evaluate(&empty, &LossWeights::default()).is_err());
}

#[test]
fn width_mismatch_rejected() {
    let bs = shape(8, 2);
    let m = model(bs, moe(3), 0);
    let wrong = Batch {
        x: DenseTensor::zeros(&[4, 6]),
        labels: vec![0],
    };
    assert!(matches!(m.evaluate(&wrong, &LossWeights::default()), Err(Error::Dimension { .. })));
}

#[test]
fn checkpoint_roundtrip() {
    let m = model(shape(8, 2), moe(3), 0);
    let ck = Checkpoint::from_model(&m, "seed = 0\n".into());
    let (bytes, manifest) = ck.to_bytes();
    assert_eq!(&bytes[..4], b"SMCK");
    assert_eq!(manifest.sections.len(), 4);
    assert_eq!(manifest.trainable_scalars, m.trainable_parameters().len());
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn bad_router_config_rejected() {
    let bs = shape(8, 2);
    assert!(SideNetwork::init(&bs, SideConfig { top_k: 4, ..moe(3) }, 2, 0).is_err());
    assert!(SideNetwork::init(&bs, SideConfig { layer_drop: vec![5], ..moe(3) }, 2, 0).is_err());
    assert!(SideNetwork::init(&bs, SideConfig { reduction: 0, ..moe(3) }, 2, 0).is_err());
}
