//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use avfd::attention::{encoder_block, scaled_dot_attention, AttentionConfig, EncoderBlockParams};
use avfd::gradcheck::{model_suite, op_suite};
use avfd::harness::{evaluate, mean_auc, run_ablation, train, AblationCell, RunConfig, Split};
use avfd::metrics::{auc, f1};
use avfd::prep::{crop_or_pad_audio, partition_audio, stereo_to_mono, AudioTrack, PrepProfile};
use avfd::synth::{generate_split, synthesize, DatasetItem, SynthConfig};
use avfd::tokenizer::TokenSequence;
use avfd::{Mode, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// libtest captures print!; a raw stdout handle keeps the criterion lines visible
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($t)*);
        let _ = out.flush();
    }};
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &res {
        Ok(detail) => say!("PASS  {name}: {detail} ({secs:.1}s)"),
        Err(detail) => say!("FAIL  {name}: {detail} ({secs:.1}s)"),
    }
    res.is_ok()
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut results = op_suite(3, 10).map_err(|e| e.to_string())?;
    results.extend(model_suite(3, 10).map_err(|e| e.to_string())?);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed() || r.seeds < 10)
        .map(|r| format!("{} {:.2e}", r.name, r.worst))
        .collect();
    ensure(failed.is_empty(), format!("over tolerance: {failed:?}"))?;
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    let worst_affine = results.iter().filter(|r| r.affine).map(|r| r.worst).fold(0.0, f64::max);
    let worst = results.iter().filter(|r| !r.affine).map(|r| r.worst).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x 10 seeds, worst affine {worst_affine:.1e} (< 1e-6), worst other {worst:.1e} (< 1e-3)",
        results.len()
    ))
}

fn shape_fidelity() -> Outcome {
    let cfg = ModelConfig::paper();
    let plan: BTreeMap<&str, Vec<usize>> = cfg.shape_plan(Mode::Multimodal).map_err(|e| e.to_string())?.into_iter().collect();
    let expect: [(&str, &[usize]); 7] = [
        ("faces", &[30, 256, 256, 3]),
        ("lips", &[300, 35, 140]),
        ("audio_frames", &[300, 1470]),
        ("video_tokens", &[3073, 1280]),
        ("lip_queries", &[300, 4900]),
        ("adapter_l1", &[4900, 4900]),
        ("adapter_l2", &[1470, 4900]),
    ];
    for (name, shape) in expect {
        ensure(plan.get(name).map(Vec::as_slice) == Some(shape), format!("{name}: {:?}", plan.get(name)))?;
    }
    ensure(plan["joint"] == [1, 4], format!("joint {:?}", plan["joint"]))?;

    // 441,000 stereo samples through the actual audio path
    let prep = PrepProfile::paper();
    let track = AudioTrack::new(Tensor::zeros(&[441_000, 2]), 44_100).map_err(|e| e.to_string())?;
    let mono = crop_or_pad_audio(&stereo_to_mono(&track), prep.audio_samples).map_err(|e| e.to_string())?;
    let frames = partition_audio(&mono, 300).map_err(|e| e.to_string())?;
    ensure(frames.frames().shape() == [300, 1470], format!("audio {:?}", frames.frames().shape()))?;
    let shapes = prep.output_shapes(300).map_err(|e| e.to_string())?;
    ensure(shapes[0] == [30, 256, 256, 3] && shapes[1] == [300, 35, 140], format!("{shapes:?}"))?;
    Ok("faces 30x256x256x3, lips 35x140, audio 300x1470, tokens 3073x1280, Q 300x4900, L1 4900x4900, L2 1470x4900, joint 4".into())
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_sum: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for _ in 0..50 {
        let (m, n, d) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..7));
        let q = Tensor::uniform(&[m, d], -3.0, 3.0, &mut rng);
        let k = Tensor::uniform(&[n, d], -3.0, 3.0, &mut rng);
        let v = Tensor::uniform(&[n, 4], -3.0, 3.0, &mut rng);
        let (out, w) = scaled_dot_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        for row in w.data().chunks(n) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let pick = |t: &Tensor| {
            let c = t.shape()[1];
            let data = perm.iter().flat_map(|&r| t.data()[r * c..(r + 1) * c].to_vec()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let (pout, _) = scaled_dot_attention(&q, &pick(&k), &pick(&v)).map_err(|e| e.to_string())?;
        for (a, b) in out.data().iter().zip(pout.data()) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    ensure(worst_sum < 1e-9, format!("row sum off by {worst_sum:e}"))?;
    ensure(worst_perm < 1e-12, format!("permutation changed output by {worst_perm:e}"))?;

    // scores 64/√4 = 32 on the diagonal, 0 elsewhere
    let n = 4;
    let eye = Tensor::new(vec![n, n], (0..n * n).map(|i| if i % (n + 1) == 0 { 8.0 } else { 0.0 }).collect()).unwrap();
    let v = Tensor::uniform(&[n, 3], -1.0, 1.0, &mut rng);
    let (out, _) = scaled_dot_attention(&eye, &eye, &v).map_err(|e| e.to_string())?;
    let sat = out.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(sat < 1e-6, format!("saturated output off by {sat:e}"))?;

    let cfg = AttentionConfig::new(4, 8, 16);
    let z0 = Tensor::uniform(&[6, 8], -2.0, 2.0, &mut rng);
    let (z1, _) = encoder_block(&TokenSequence { tokens: z0.clone() }, &EncoderBlockParams::zero_sublayers(&cfg), &cfg)
        .map_err(|e| e.to_string())?;
    ensure(z1 == z0, "zero sublayers changed the residual stream")?;
    Ok(format!(
        "row sums within {worst_sum:.0e}, permutation drift {worst_perm:.0e}, saturation error {sat:.0e}, residual exact"
    ))
}

fn pairwise_auc(s: &[(f64, usize)]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for &(p, lp) in s {
        for &(q, lq) in s {
            if lp == 1 && lq == 0 {
                pairs += 1;
                twice_wins += if p > q { 2 } else if p == q { 1 } else { 0 };
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// F1 = 2PR/(P+R) with precision and recall as exact fractions.
fn enumerated_f1(s: &[(f64, usize)], threshold: f64) -> f64 {
    let mut confusion = [[0u64; 2]; 2];
    for &(p, l) in s {
        confusion[(p >= threshold) as usize][l] += 1;
    }
    let (tp, fp, fneg) = (confusion[1][1], confusion[1][0], confusion[0][1]);
    if tp == 0 {
        return 0.0;
    }
    let (pn, pd) = (tp, tp + fp);
    let (rn, rd) = (tp, tp + fneg);
    let num = 2 * pn * rn * pd * rd;
    let den = pd * rd * (pn * rd + rn * pd);
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for case in 0..100 {
        let n = rng.gen_range(2..=200);
        let mut s: Vec<(f64, usize)> = (0..n).map(|_| (rng.gen_range(0..11) as f64 / 10.0, rng.gen_range(0..2))).collect();
        s[0].1 = 0;
        s[1].1 = 1;
        let (a, b) = (auc(&s).map_err(|e| e.to_string())?, pairwise_auc(&s));
        ensure(a == b, format!("case {case}: auc {a} vs pairwise {b}"))?;
        let (f, g) = (f1(&s, 0.5), enumerated_f1(&s, 0.5));
        ensure(f == g, format!("case {case}: f1 {f} vs enumeration {g}"))?;
    }
    let worked = [(0.9, 1), (0.4, 1), (0.6, 0), (0.1, 0)];
    ensure(auc(&worked).unwrap() == 0.75, "worked AUC")?;
    let mut s = vec![(0.9, 1); 8];
    s.extend([(0.8, 0); 2]);
    s.extend([(0.1, 1); 2]);
    ensure(f1(&s, 0.5) == 0.8, "worked F1")?;
    Ok("100 random AUC and F1 cases exact, worked AUC 0.75 and F1 0.8".into())
}

struct Ablation {
    cells: Vec<AblationCell>,
    epochs: usize,
}

fn run_desk_ablation() -> Result<Ablation, String> {
    let model_cfg = ModelConfig::desk();
    let synth = SynthConfig::desk();
    let prep = model_cfg.prep_profile();
    let train_items = generate_split(&synth, &prep, 0).map_err(|e| e.to_string())?;
    let test_items = generate_split(&synth, &prep, 1).map_err(|e| e.to_string())?;
    let base = RunConfig::desk();
    let cells = run_ablation(&base, &model_cfg, &train_items, &test_items, &[0, 1, 2], |line| say!("      {line}"))
        .map_err(|e| e.to_string())?;
    Ok(Ablation { cells, epochs: base.epochs })
}

fn learnability(ab: &Result<Ablation, String>) -> Outcome {
    let ab = ab.as_ref().map_err(Clone::clone)?;
    let cell = ab
        .cells
        .iter()
        .find(|c| c.seed == 0 && c.mode == Mode::Multimodal && c.split == Split::Mixed)
        .ok_or("no multimodal cell")?;
    ensure(ab.epochs <= 20, format!("{} epochs", ab.epochs))?;
    ensure(cell.train_seconds < 600.0, format!("training took {:.0}s", cell.train_seconds))?;
    ensure(cell.auc >= 0.90, format!("AUC {:.4} after {} epochs", cell.auc, ab.epochs))?;
    Ok(format!(
        "multimodal test AUC {:.4} >= 0.90 after {} epochs, trained in {:.0}s on one core",
        cell.auc, ab.epochs, cell.train_seconds
    ))
}

fn ablation_ordering(ab: &Result<Ablation, String>) -> Outcome {
    let ab = ab.as_ref().map_err(Clone::clone)?;
    let m = |mode, split| mean_auc(&ab.cells, mode, split);
    let (la_d, fo_d) = (m(Mode::LipAudioOnly, Split::Desync), m(Mode::FeaturesOnly, Split::Desync));
    let (la_a, fo_a) = (m(Mode::LipAudioOnly, Split::Artifact), m(Mode::FeaturesOnly, Split::Artifact));
    let mm = m(Mode::Multimodal, Split::Mixed);
    let best = m(Mode::LipAudioOnly, Split::Mixed).max(m(Mode::FeaturesOnly, Split::Mixed));
    let detail = format!(
        "means over 3 seeds: desync lip-audio {la_d:.3} / features {fo_d:.3}; artifact features {fo_a:.3} / lip-audio {la_a:.3}; mixed multimodal {mm:.3} vs best ablation {best:.3}"
    );
    let ok = la_d >= 0.85 && fo_d <= 0.65 && fo_a >= 0.85 && la_a <= 0.65 && mm >= best - 0.02;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism_and_persistence() -> Outcome {
    let model_cfg = ModelConfig::desk();
    let synth = SynthConfig { n_train: 8, n_test: 8, seed: 5, ..SynthConfig::desk() };
    let prep = model_cfg.prep_profile();
    let train_items = generate_split(&synth, &prep, 0).map_err(|e| e.to_string())?;
    let test_items = generate_split(&synth, &prep, 1).map_err(|e| e.to_string())?;
    let lines = |run: &RunConfig, items: &[DatasetItem]| -> Result<(String, Model), String> {
        let out = train(run, &model_cfg, items, |_| {}).map_err(|e| e.to_string())?;
        let mut report = evaluate(&out.model, run.mode, &test_items, false).map_err(|e| e.to_string())?;
        report.epoch_accuracies = out.epochs.iter().map(|e| e.accuracy).collect();
        Ok((report.machine_lines() + &report.score_lines(), out.model))
    };
    let run = RunConfig { epochs: 2, seed: 9, ..RunConfig::desk() };
    let (a, model) = lines(&run, &train_items)?;
    let (b, _) = lines(&run, &train_items)?;
    ensure(a == b, "same-seed metric lines differ")?;
    let (c, _) = lines(&RunConfig { deterministic: false, ..run.clone() }, &train_items)?;
    ensure(a == c, "parallel run differs from sequential")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.mmck");
    model.save(&path, run.mode).map_err(|e| e.to_string())?;
    let loaded = Model::load(&path, model_cfg.clone()).map_err(|e| e.to_string())?;
    for p in loaded.params().iter() {
        let orig = model.params().value(&p.name).map_err(|e| e.to_string())?;
        let same = orig.data().iter().zip(p.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("parameter {} changed on reload", p.name))?;
    }
    for it in &test_items {
        let (x, y) = (model.predict(&it.sample, run.mode), loaded.predict(&it.sample, run.mode));
        ensure(x.map_err(|e| e.to_string())? == y.map_err(|e| e.to_string())?, "prediction changed on reload")?;
    }

    let small = SynthConfig { n_train: 4, n_test: 4, seed: 7, ..SynthConfig::desk() };
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    synthesize(&small, &prep, &d1).map_err(|e| e.to_string())?;
    synthesize(&small, &prep, &d2).map_err(|e| e.to_string())?;
    let (f1s, f2s) = (files_under(&d1), files_under(&d2));
    ensure(!f1s.is_empty() && f1s == f2s, "dataset bytes differ between same-seed runs")?;
    Ok(format!(
        "metric lines identical across 3 runs, {} parameters reload bit-exact, {} dataset files byte-identical",
        loaded.params().len(),
        f1s.len()
    ))
}

fn parameter_counts() -> Outcome {
    let mut detail = Vec::new();
    for cfg in [ModelConfig::paper(), ModelConfig::desk()] {
        let [mm, la, fo] = Mode::ALL.map(|m| cfg.count_parameters(m));
        ensure(mm > la && la > fo, format!("{:?}: {mm} / {la} / {fo}", cfg.profile))?;
        detail.push(format!("{:?} {mm} > {la} > {fo}", cfg.profile));
    }
    Ok(detail.join("; "))
}

#[test]
fn acceptance() {
    assert_eq!(Mode::ALL, [Mode::Multimodal, Mode::LipAudioOnly, Mode::FeaturesOnly]);
    let mut ok = vec![
        run("gradient suite", gradient_suite),
        run("shape fidelity", shape_fidelity),
        run("attention invariants", attention_invariants),
        run("metric oracles", metric_oracles),
        run("determinism and persistence", determinism_and_persistence),
        run("parameter-count monotonicity", parameter_counts),
    ];
    say!("      training 3 modes x 3 seeds on the desk profile");
    let ab = catch_unwind(run_desk_ablation).unwrap_or_else(|_| Err("ablation panicked".into()));
    ok.push(run("synthetic learnability", || learnability(&ab)));
    ok.push(run("ablation ordering", || ablation_ordering(&ab)));
    let failed = ok.iter().filter(|&&p| !p).count();
    say!("{} of {} criteria passed", ok.len() - failed, ok.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
