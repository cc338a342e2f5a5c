mod common;

use common::{random_tensor, randomize};
use fdft_core::autograd::{BnIds, ParamStore, Tape, Var};
use fdft_core::ftt::SelfAttention;
use fdft_core::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use fdft_core::mbblock::{MbBlock, MbBlockConfig};
use fdft_core::model::{BackboneConfig, Classifier, DetectorModel, ModelConfig};
use fdft_core::nn;
use fdft_core::ops::{Activation, Mode};
use fdft_core::{Result, Shape};

const TOL: f64 = 1e-4;

fn check<F>(store: &mut ParamStore<f64>, inputs: &[fdft_core::Tensor<f64>], cfg: GradCheckConfig, build: F) -> GradCheckReport
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(store, inputs, cfg, build).unwrap();
    assert!(report.coordinates > 0);
    assert!(report.max_rel_error <= TOL, "{report:?}");
    report
}

fn x(n: usize, h: usize, w: usize, c: usize, seed: u64) -> fdft_core::Tensor<f64> {
    random_tensor(Shape::new(n, h, w, c), seed, 1.0)
}

#[test]
fn conv1x1_with_bias_and_stride() {
    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let w = nn::pointwise(&mut store, "w".into(), 3, 4).unwrap();
        let b = nn::bias(&mut store, "b".into(), 4).unwrap();
        randomize(&mut store, 1);
        check(&mut store, &[x(2, 5, 5, 3, 2)], GradCheckConfig::default(), |t, v| {
            let (wv, bv) = (t.param(w), t.param(b));
            t.conv1x1(v[0], wv, Some(bv), stride)
        });
    }
}

#[test]
fn depthwise_and_separable() {
    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let k = nn::depthwise(&mut store, "k".into(), 3).unwrap();
        let p = nn::pointwise(&mut store, "p".into(), 3, 5).unwrap();
        randomize(&mut store, 3);
        check(&mut store, &[x(2, 6, 5, 3, 4)], GradCheckConfig::default(), |t, v| {
            let kv = t.param(k);
            t.depthwise3x3(v[0], kv, stride)
        });
        check(&mut store, &[x(1, 7, 7, 3, 5)], GradCheckConfig::default(), |t, v| {
            let (kv, pv) = (t.param(k), t.param(p));
            t.separable3x3(v[0], kv, pv, stride)
        });
    }
}

#[test]
fn batch_norm_both_modes() {
    for mode in [Mode::Train, Mode::Infer] {
        let mut store = ParamStore::new();
        let bn = BnIds::register(&mut store, "bn", 4).unwrap();
        randomize(&mut store, 6);
        check(&mut store, &[x(3, 2, 2, 4, 7)], GradCheckConfig::default(), |t, v| t.batch_norm(v[0], bn, mode));
    }
}

#[test]
fn activations() {
    for act in [
        Activation::Relu,
        Activation::Relu6,
        Activation::HSwish,
        Activation::HardSigmoid,
        Activation::Sigmoid,
    ] {
        let mut store = ParamStore::new();
        let input = random_tensor(Shape::new(2, 3, 3, 4), 8, 5.0);
        check(&mut store, &[input], GradCheckConfig::default(), |t, v| Ok(t.activation(v[0], act)));
    }
}

#[test]
fn pooling_dense_and_elementwise() {
    let mut store = ParamStore::new();
    let w = nn::pointwise(&mut store, "w".into(), 4, 2).unwrap();
    let b = nn::bias(&mut store, "b".into(), 2).unwrap();
    randomize(&mut store, 9);
    check(&mut store, &[x(2, 3, 3, 4, 10)], GradCheckConfig::default(), |t, v| {
        let p = t.global_avg_pool(v[0]);
        let (wv, bv) = (t.param(w), t.param(b));
        t.dense(p, wv, bv)
    });
    let mut empty = ParamStore::new();
    let inputs = [x(2, 3, 3, 4, 11), x(2, 3, 3, 4, 12), x(2, 1, 1, 4, 13), x(2, 3, 3, 2, 14)];
    check(&mut empty, &inputs, GradCheckConfig::default(), |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[1])?;
        let g = t.channel_gate(m, v[2])?;
        let c = t.concat_channels(g, v[3])?;
        let r = t.reshape(c, Shape::new(2, 1, 9, 6))?;
        Ok(t.sum(r))
    });
    check(&mut empty, &[x(2, 3, 3, 4, 15), x(1, 1, 1, 1, 16)], GradCheckConfig::default(), |t, v| {
        t.scale(v[0], v[1])
    });
}

#[test]
fn attention_pieces() {
    let mut store = ParamStore::new();
    let g = x(2, 1, 6, 3, 20);
    let f = x(2, 1, 6, 3, 21);
    let h = x(2, 1, 6, 5, 22);
    check(&mut store, &[g.clone(), f.clone()], GradCheckConfig::default(), |t, v| t.energies(v[0], v[1]));
    check(&mut store, &[x(2, 1, 6, 6, 23)], GradCheckConfig::default(), |t, v| Ok(t.softmax_rows(v[0])));
    check(&mut store, &[x(2, 1, 6, 6, 24), h.clone()], GradCheckConfig::default(), |t, v| t.batchdot(v[0], v[1]));
    check(&mut store, &[g, f, h], GradCheckConfig::default(), |t, v| t.attention_core(v[0], v[1], v[2]));
}

#[test]
fn attention_core_spans_several_row_blocks() {
    let mut store = ParamStore::new();
    let l = 150;
    let inputs = [x(1, 1, l, 2, 30), x(1, 1, l, 2, 31), x(1, 1, l, 3, 32)];
    let cfg = GradCheckConfig {
        max_coordinates: Some(300),
        ..GradCheckConfig::default()
    };
    check(&mut store, &inputs, cfg, |t, v| t.attention_core(v[0], v[1], v[2]));
}

#[test]
fn attention_module_1x8x8x8() {
    for bottleneck in [8, 2] {
        let mut store = ParamStore::new();
        let att = SelfAttention::register(&mut store, "att", 8, bottleneck).unwrap();
        randomize(&mut store, 40);
        check(&mut store, &[x(1, 8, 8, 8, 41)], GradCheckConfig::default(), |t, v| att.forward(t, v[0]));
    }
}

#[test]
fn reduced_mbblock() {
    for (c_in, stride, residual) in [(8, 1, true), (4, 2, false)] {
        let cfg = MbBlockConfig {
            c_in,
            expand_width: 16,
            se_width: 4,
            out_width: 8,
            stride,
            residual,
        };
        let mut store = ParamStore::new();
        let block = MbBlock::register(&mut store, "mb", cfg).unwrap();
        randomize(&mut store, 50);
        check(&mut store, &[x(2, 4, 4, c_in, 51)], GradCheckConfig::default(), |t, v| {
            block.forward(t, v[0], Mode::Train)
        });
    }
}

#[test]
fn assembled_model_with_two_stage_backbone() {
    let mut cfg = ModelConfig::new(3, 2);
    cfg.backbone = BackboneConfig {
        widths: vec![16, 32],
        strides: vec![2, 2],
        ..BackboneConfig::default()
    };
    cfg.input_size = 16;
    let mut model = DetectorModel::<f64>::build(cfg).unwrap();
    model.freeze_backbone(false);
    randomize(&mut model.store, 60);
    let gc = GradCheckConfig {
        eps: 1e-6,
        max_coordinates: Some(600),
        seed: 61,
    };
    // the graph only needs parameter ids, so the store can be moved out
    let mut store = std::mem::take(&mut model.store);
    let report = check(&mut store, &[x(2, 16, 16, 3, 62)], gc, |t, v| model.logits(t, v[0], Mode::Train));
    assert_eq!(report.coordinates, 600);
}
