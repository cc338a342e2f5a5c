//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fdft_core::augment::{self, CutoutConfig};
use fdft_core::autograd::{BnIds, ParamRole, ParamStore, Tape, Var};
use fdft_core::data::{self, SyntheticTaskConfig, FAKE};
use fdft_core::ftt::SelfAttention;
use fdft_core::gradcheck::{finite_diff_check, GradCheckConfig};
use fdft_core::mbblock::{MbBlock, MbBlockConfig};
use fdft_core::model::{BackboneConfig, Classifier, DetectorModel, ModelConfig};
use fdft_core::nn;
use fdft_core::ops::{Activation, Mode};
use fdft_core::train::{self, TrainConfig};
use fdft_core::{weights, Result as CoreResult, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Ctx {
    dir: tempfile::TempDir,
    backbone: Option<PathBuf>,
    model: Option<PathBuf>,
    checksums: Option<(String, String)>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fdft(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fdft"))
        .args(args)
        .env_remove("FDFT_PROFILE")
        .output()
        .map_err(|e| format!("spawning fdft: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "fdft {} failed: {}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn field<'a>(out: &'a str, key: &str) -> Option<&'a str> {
    out.split_whitespace().find_map(|t| t.strip_prefix(key)?.strip_prefix('='))
}

fn metrics(out: &str) -> Result<(f64, f64), String> {
    let parse = |k| {
        field(out, k)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| format!("no {k}=<float> in output"))
    };
    Ok((parse("ACC")?, parse("AUROC")?))
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let role = store.get(id).role;
        for v in store.get_mut(id).value.data_mut() {
            *v = match role {
                ParamRole::BnGamma => rng.gen_range(0.8..1.2),
                ParamRole::BnMovingVar => rng.gen_range(0.5..1.5),
                ParamRole::AttentionGamma => rng.gen_range(0.3..0.7),
                _ => rng.gen_range(-0.5..0.5),
            };
        }
    }
}

// 1 ------------------------------------------------------------------------

fn param_audit(_: &mut Ctx) -> Check {
    let out = fdft(&["params", "--m", "3", "--n", "4"])?;
    let rows: Vec<(String, usize)> = out
        .lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            if cols.len() < 3 || cols[0] == "layer" || cols[0] == "total" {
                return None;
            }
            let n = cols[cols.len() - 2].replace(',', "").parse().ok()?;
            Some((cols[0].to_string(), n))
        })
        .collect();
    let get = |layer: &str| rows.iter().find(|(l, _)| l == layer).map(|r| r.1);
    let expected = [
        ("ftt.stage1.dconv", 123),
        ("ftt.stage2.dconv", 2_336),
        ("ftt.stage3.dconv", 8_768),
        ("ftt.stage1.attn", 1_321),
        ("ftt.stage2.attn", 5_201),
        ("ftt.stage3.attn", 20_641),
        ("ftt.head.conv", 73_728),
        ("ftt.stage1.bn", 128),
        ("ftt.stage2.bn", 256),
        ("ftt.stage3.bn", 512),
        ("ftt.head.bn", 2_304),
        ("mb.dw", 5_184),
        ("mb.se.reduce", 82_944),
        ("mb.se.expand", 82_944),
        ("mb.project", 73_728),
    ];
    for (layer, want) in expected {
        let got = get(layer).ok_or_else(|| format!("row {layer} missing"))?;
        ensure(got == want, format!("{layer}: {got} != {want}"))?;
    }
    let ftt_sum: usize = rows.iter().filter(|(l, _)| l.starts_with("ftt.")).map(|r| r.1).sum();
    ensure(ftt_sum == 115_318, format!("transformer rows sum to {ftt_sum}"))?;
    let first_block: usize = rows
        .iter()
        .filter(|(l, _)| l.starts_with("mb."))
        .take(16)
        .map(|r| r.1)
        .sum();
    ensure(first_block == 323_648, format!("block rows sum to {first_block}"))?;
    ensure(out.contains("trainable total: 1,410,615"), "trainable total line missing")?;
    Ok("15 table rows exact, transformer 115,318, block 323,648".into())
}

// 2 ------------------------------------------------------------------------

fn identity_at_init(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100u64 {
        let c = [8, 16, 32][trial as usize % 3];
        let mut store = ParamStore::<f64>::new();
        let att = SelfAttention::register(&mut store, "att", c, 8).map_err(|e| e.to_string())?;
        randomize(&mut store, trial);
        store.get_mut(att.gamma).value.data_mut()[0] = 0.0;
        let side = rng.gen_range(1..9);
        let x = random(Shape::new(rng.gen_range(1..3), side, side + 1, c), &mut rng, 50.0);
        let mut tape = Tape::new(&store);
        let v = tape.input(x.clone());
        let y = att.forward(&mut tape, v).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(tape.value(y)) == bits(&x), format!("trial {trial}: output differs from input"))?;
    }
    Ok("100 random inputs returned bit for bit".into())
}

// 3 ------------------------------------------------------------------------

fn gradcheck<F>(store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], cfg: GradCheckConfig, build: F) -> Result<f64, String>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> CoreResult<Var>,
{
    let r = finite_diff_check(store, inputs, cfg, build).map_err(|e| e.to_string())?;
    Ok(r.max_rel_error)
}

fn gradient_correctness(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = |s: Shape| random(s, &mut rng, 1.0);
    let dflt = GradCheckConfig::default();
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let mut store = ParamStore::new();
    let w = nn::pointwise(&mut store, "w".into(), 3, 4).unwrap();
    let b = nn::bias(&mut store, "b".into(), 4).unwrap();
    let k = nn::depthwise(&mut store, "k".into(), 3).unwrap();
    let p = nn::pointwise(&mut store, "p".into(), 3, 4).unwrap();
    let bn = BnIds::register(&mut store, "bn", 4).unwrap();
    let dw = nn::pointwise(&mut store, "dw".into(), 4, 2).unwrap();
    let db = nn::bias(&mut store, "db".into(), 2).unwrap();
    randomize(&mut store, 30);
    let img = x(Shape::new(2, 5, 5, 3));
    worst.push(("conv1x1", gradcheck(&mut store, &[img.clone()], dflt, |t, v| {
        let (wv, bv) = (t.param(w), t.param(b));
        t.conv1x1(v[0], wv, Some(bv), 2)
    })?));
    worst.push(("depthwise3x3", gradcheck(&mut store, &[img.clone()], dflt, |t, v| {
        let kv = t.param(k);
        t.depthwise3x3(v[0], kv, 1)
    })?));
    worst.push(("separable3x3", gradcheck(&mut store, &[img.clone()], dflt, |t, v| {
        let (kv, pv) = (t.param(k), t.param(p));
        t.separable3x3(v[0], kv, pv, 2)
    })?));
    let feat = x(Shape::new(3, 2, 2, 4));
    for mode in [Mode::Train, Mode::Infer] {
        worst.push(("batch_norm", gradcheck(&mut store, &[feat.clone()], dflt, |t, v| t.batch_norm(v[0], bn, mode))?));
    }
    for act in [Activation::Relu, Activation::Relu6, Activation::HSwish, Activation::HardSigmoid, Activation::Sigmoid] {
        let wide = feat.map(|v| 5.0 * v);
        worst.push(("activation", gradcheck(&mut store, &[wide], dflt, |t, v| Ok(t.activation(v[0], act)))?));
    }
    worst.push(("gap+dense", gradcheck(&mut store, &[feat.clone()], dflt, |t, v| {
        let g = t.global_avg_pool(v[0]);
        let (wv, bv) = (t.param(dw), t.param(db));
        t.dense(g, wv, bv)
    })?));
    let (l, d, c) = (7, 3, 4);
    let (g, f, h) = (x(Shape::new(2, 1, l, d)), x(Shape::new(2, 1, l, d)), x(Shape::new(2, 1, l, c)));
    let mut empty = ParamStore::new();
    worst.push(("energies", gradcheck(&mut empty, &[g.clone(), f.clone()], dflt, |t, v| t.energies(v[0], v[1]))?));
    worst.push(("softmax_rows", gradcheck(&mut empty, &[x(Shape::new(2, 1, l, l))], dflt, |t, v| Ok(t.softmax_rows(v[0])))?));
    worst.push(("batchdot", gradcheck(&mut empty, &[x(Shape::new(2, 1, l, l)), h.clone()], dflt, |t, v| t.batchdot(v[0], v[1]))?));
    worst.push(("attention_core", gradcheck(&mut empty, &[g, f, h], dflt, |t, v| t.attention_core(v[0], v[1], v[2]))?));
    let (a, bb, gate) = (x(Shape::new(2, 2, 2, 4)), x(Shape::new(2, 2, 2, 4)), x(Shape::new(2, 1, 1, 4)));
    worst.push(("elementwise", gradcheck(&mut empty, &[a, bb, gate, x(Shape::new(2, 2, 2, 3))], dflt, |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[0])?;
        let gated = t.channel_gate(m, v[2])?;
        let cat = t.concat_channels(gated, v[3])?;
        Ok(t.sum(cat))
    })?));

    let mut store = ParamStore::new();
    let att = SelfAttention::register(&mut store, "att", 8, 8).unwrap();
    randomize(&mut store, 31);
    worst.push(("attention (1,8,8,8)", gradcheck(&mut store, &[x(Shape::new(1, 8, 8, 8))], dflt, |t, v| att.forward(t, v[0]))?));

    let mut store = ParamStore::new();
    let cfg = MbBlockConfig {
        c_in: 8,
        expand_width: 16,
        se_width: 4,
        out_width: 8,
        stride: 1,
        residual: true,
    };
    let block = MbBlock::register(&mut store, "mb", cfg).unwrap();
    randomize(&mut store, 32);
    worst.push(("reduced block", gradcheck(&mut store, &[x(Shape::new(2, 4, 4, 8))], dflt, |t, v| block.forward(t, v[0], Mode::Train))?));

    let mut mcfg = ModelConfig::new(3, 2);
    mcfg.backbone = BackboneConfig {
        widths: vec![16, 32],
        strides: vec![2, 2],
        ..BackboneConfig::default()
    };
    mcfg.input_size = 16;
    let mut model = DetectorModel::<f64>::build(mcfg).unwrap();
    model.freeze_backbone(false);
    randomize(&mut model.store, 33);
    let mut store = std::mem::take(&mut model.store);
    let sampled = GradCheckConfig {
        eps: 1e-6,
        max_coordinates: Some(600),
        seed: 34,
    };
    worst.push(("model 16x16", gradcheck(&mut store, &[x(Shape::new(2, 16, 16, 3))], sampled, |t, v| model.logits(t, v[0], Mode::Train))?));

    let (name, max) = worst.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    ensure(max <= 1e-4, format!("{name}: relative error {max:.3e} > 1e-4"))?;
    Ok(format!("{} checks, worst {max:.2e} ({name})", worst.len()))
}

// 4 ------------------------------------------------------------------------

fn metric_oracle(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for set in 0..500 {
        let n = rng.gen_range(2..200);
        let levels = rng.gen_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let got = train::auroc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure((got - wins / pairs).abs() <= 1e-12, format!("set {set}: {got} vs {}", wins / pairs))?;
        let hits = scores.iter().zip(&labels).filter(|(s, l)| (**s >= 0.5) as u8 == **l).count();
        ensure(train::accuracy(&scores, &labels) == hits as f64 / n as f64, format!("set {set}: accuracy"))?;
    }
    Ok("500 tied score sets match pair counting".into())
}

// 5 ------------------------------------------------------------------------

fn schedule_and_optimizer(_: &mut Ctx) -> Check {
    ensure(train::cosine_lr(0, 60, 0.3) == 0.3, "lr at epoch 0")?;
    let end = train::cosine_lr(60, 60, 0.3);
    ensure(end.abs() < 1e-16, format!("lr at last epoch {end}"))?;
    let (mut p, mut v) = ([1.0f64], [0.0f64]);
    for _ in 0..2 {
        train::sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).map_err(|e| e.to_string())?;
    }
    ensure((p[0] - 0.71).abs() <= 1e-12, format!("two-step trace gave {}", p[0]))?;
    Ok(format!("lr 0.3 -> {end:.1e}, two steps -> {:.12}", p[0]))
}

// 6 ------------------------------------------------------------------------

fn desk_learning(ctx: &mut Ctx) -> Check {
    let data_dir = ctx.path("task");
    let bb = ctx.path("backbone.fdwt");
    let model = ctx.path("model.fdwt");
    let d = data_dir.to_str().unwrap();
    fdft(&["synth-data", "--out", d, "--n-per-class", "900", "--seed", "42", "--artifact-amp", "0.25"])?;
    fdft(&["pretrain", "--data", d, "--out", bb.to_str().unwrap(), "--seed", "42"])?;
    ctx.backbone = Some(bb.clone());
    let out = fdft(&[
        "finetune",
        "--backbone",
        bb.to_str().unwrap(),
        "--data",
        d,
        "--m",
        "3",
        "--n",
        "2",
        "--cutout-alpha",
        "3",
        "--cutout-beta",
        "5",
        "--out",
        model.to_str().unwrap(),
        "--seed",
        "42",
    ])?;
    ctx.model = Some(model.clone());
    ctx.checksums = field(&out, "backbone_checksum_before")
        .zip(field(&out, "backbone_checksum_after"))
        .map(|(a, b)| (a.to_string(), b.to_string()));
    let epochs: usize = field(&out, "epochs").and_then(|v| v.parse().ok()).ok_or("no epoch count")?;
    let (acc, auroc) = metrics(&out)?;

    // held-out fakes scored individually
    let m = weights::load_model::<f32>(&model).map_err(|e| e.to_string())?;
    let all = data::load_dataset_dir(&data_dir).map_err(|e| e.to_string())?;
    let [_, _, test, _] = data::split(&all, [4.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0], 42).map_err(|e| e.to_string())?;
    let scores = train::score(&m, &test, 64).map_err(|e| e.to_string())?;
    let probs = scores.probs();
    let fakes: Vec<f64> = probs.iter().zip(&scores.labels).filter(|(_, &l)| l == FAKE).map(|(p, _)| *p).collect();
    let caught = fakes.iter().filter(|&&p| p > 0.5).count() as f64 / fakes.len() as f64;

    let summary = format!("test ACC {acc:.4} AUROC {auroc:.4}, {epochs} epochs, fakes caught {caught:.3}");
    ensure(test.len() == 400 && fakes.len() == 200, format!("test split has {} images", test.len()))?;
    ensure(epochs <= 60, format!("{summary}: too many epochs"))?;
    ensure(acc >= 0.95 && auroc >= 0.98 && caught >= 0.95, summary.clone())?;
    Ok(summary)
}

// 7 ------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation(ctx: &mut Ctx) -> Check {
    let bb = ctx.backbone.clone().ok_or("no pretrained backbone from criterion 6")?;
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let cfg = SyntheticTaskConfig {
            n_per_class: 150,
            seed,
            ..SyntheticTaskConfig::default()
        };
        let all = data::generate_synthetic(&cfg, None).map_err(|e| e.to_string())?;
        let [_, val, test, ft] = data::split(&all, [0.2, 0.2, 0.2, 0.4], seed).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            max_epochs: 10,
            patience: 5,
            seed,
            ..TrainConfig::desk()
        };
        for (enabled, out) in [(true, &mut with), (false, &mut without)] {
            let mut mc = ModelConfig::new(3, 2);
            mc.ftt_enabled = enabled;
            let (m, _) = train::fine_tune::<f32>(&bb, &ft, &val, mc, &tc, |_| {}).map_err(|e| e.to_string())?;
            out.push(train::evaluate(&m, &test, 64).map_err(|e| e.to_string())?.auroc().map_err(|e| e.to_string())?);
        }
    }
    let ordered = with.iter().zip(&without).filter(|(a, b)| a >= b).count();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(",");
    let ties = with.iter().zip(&without).filter(|(a, b)| a == b).count();
    let summary = format!(
        "median AUROC with {:.4} [{}] without {:.4} [{}], with >= without on {ordered}/5 seeds ({ties} ties)",
        median(with.clone()),
        fmt(&with),
        median(without.clone()),
        fmt(&without)
    );
    ensure(median(with) >= median(without) && ordered >= 4, summary.clone())?;
    Ok(summary)
}

// 8 ------------------------------------------------------------------------

fn small_pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let d = root.join("data");
    let bb = root.join("bb.fdwt");
    let m = root.join("m.fdwt");
    fdft(&["synth-data", "--out", d.to_str().unwrap(), "--n-per-class", "36", "--seed", "8"])?;
    fdft(&["pretrain", "--data", d.to_str().unwrap(), "--out", bb.to_str().unwrap(), "--epochs", "2", "--seed", "8"])?;
    fdft(&[
        "finetune",
        "--backbone",
        bb.to_str().unwrap(),
        "--data",
        d.to_str().unwrap(),
        "--n",
        "2",
        "--epochs",
        "2",
        "--out",
        m.to_str().unwrap(),
        "--seed",
        "8",
    ])?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    Ok((read(&bb)?, read(&m)?))
}

fn freezing_and_reproducibility(ctx: &mut Ctx) -> Check {
    let (before, after) = ctx.checksums.clone().ok_or("no checksums from criterion 6")?;
    ensure(before == after, format!("backbone checksum {before} became {after}"))?;
    let model_path = ctx.model.clone().ok_or("no model from criterion 6")?;
    let bytes = std::fs::read(&model_path).map_err(|e| e.to_string())?;
    let loaded = weights::model_from_bytes::<f32>(&bytes).map_err(|e| e.to_string())?;
    ensure(format!("{:08x}", loaded.backbone_checksum()) == before, "saved model has a different backbone")?;
    let again = ctx.path("model_again.fdwt");
    weights::save_model(&loaded, &again).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&again).map_err(|e| e.to_string())? == bytes, "save -> load -> save changed bytes")?;

    let a = ctx.path("run_a");
    let b = ctx.path("run_b");
    let first = small_pipeline(&a)?;
    let second = small_pipeline(&b)?;
    ensure(first.0 == second.0, "backbone files differ between identical runs")?;
    ensure(first.1 == second.1, "model files differ between identical runs")?;
    Ok(format!("checksum {before} unchanged, {} byte model round-trips, repeated runs identical", bytes.len()))
}

// 9 ------------------------------------------------------------------------

fn cutout_properties(_: &mut Ctx) -> Check {
    let cfg = CutoutConfig::default();
    let bound = 3.0 * (4.0 * cfg.beta as f64).powi(2) / (64.0 * 64.0);
    let img = Tensor::<f64>::full(Shape::new(1, 64, 64, 3), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut largest = 0.0f64;
    for i in 0..10_000 {
        let (out, masks) = augment::cutout_with_masks(&img, &cfg, &mut rng);
        let mut zeroed = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let masked = masks.iter().any(|r| r.contains(y, x));
                for c in 0..3 {
                    let v = out.get(0, y, x, c);
                    ensure(if masked { v == 0.0 } else { v == 1.0 }, format!("application {i}: pixel ({y},{x})"))?;
                }
                zeroed += masked as usize;
            }
        }
        let frac = zeroed as f64 / 4096.0;
        largest = largest.max(frac);
        ensure(frac <= bound, format!("application {i}: zeroed {frac:.4} > {bound:.4}"))?;
    }
    let none = CutoutConfig { alpha: 0, ..cfg };
    let photo = Tensor::from_fn(Shape::new(1, 64, 64, 3), |[_, y, x, c]| ((y * 64 + x) * 3 + c) as f64 / 12288.0);
    ensure(augment::cutout(&photo, &none, &mut rng) == photo, "alpha 0 changed the image")?;
    Ok(format!("10,000 applications, largest zeroed fraction {largest:.4} <= {bound:.4}"))
}

fn main() {
    let mut ctx = Ctx {
        dir: tempfile::tempdir().expect("temp dir"),
        backbone: None,
        model: None,
        checksums: None,
    };
    type Criterion = (usize, &'static str, fn(&mut Ctx) -> Check, Option<Duration>);
    let criteria: [Criterion; 9] = [
        (1, "parameter-count audit", param_audit, Some(Duration::from_secs(1))),
        (2, "identity at initialization", identity_at_init, Some(Duration::from_secs(5))),
        (3, "gradient correctness", gradient_correctness, Some(Duration::from_secs(300))),
        (4, "metric oracle", metric_oracle, Some(Duration::from_secs(10))),
        (5, "schedule and optimizer", schedule_and_optimizer, None),
        (6, "desk-scale learning", desk_learning, Some(Duration::from_secs(15 * 60))),
        (7, "ablation direction", ablation, None),
        (8, "freezing and reproducibility", freezing_and_reproducibility, None),
        (9, "cutout properties", cutout_properties, None),
    ];
    let mut failed = 0;
    for (n, name, f, limit) in criteria {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let took = t0.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), l.as_secs_f64())),
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", e)
            }
        };
        println!("{tag} criterion {n} ({name}): {detail} [{:.2}s]", took.as_secs_f64());
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
