//! Acceptance checks 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use prosody_ensemble::afp::{
    train, validation_loss, AfpInput, AfpModel, Architecture, ModelDims, TrainConfig, CONV_DROPOUT, OUTPUT_DIM,
};
use prosody_ensemble::corpus::{gen_corpus, CorpusConfig, ProsodyTargets};
use prosody_ensemble::criteria::{
    afp_f0_score, gv_of, select, CriterionKind, CriterionSpec, GvNormalization, Polarity, RenderSettings, Rendition,
    StageCounters,
};
use prosody_ensemble::dsp::{FeatureMatrix, MatrixKind, Waveform};
use prosody_ensemble::eval::{
    accuracy, binomial_two_sided, fisher_exact_two_sided, holm_bonferroni, oracle_accuracy, proportion_ci_95,
    simulate_preferences, Choice, PanelConfig, PreferenceRecord, ProxyPair,
};
use prosody_ensemble::pipeline::{evaluate, Profile, RunConfig, RunResults, Workspace};
use prosody_ensemble::pitch::{f0_variance, track_pitch, viterbi, PitchConfig, PitchFrame, PitchTrack, TransitionCosts};
use rand::Rng;
use support::*;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_secs, || {
        format!("{what} took {:.0}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn c1_gradients() -> Result<String, String> {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    for (i, case) in catalogue().iter().enumerate() {
        let err = gradcheck(case, 10, 500 + i as u64);
        ensure(err < 1e-4, || format!("{}: max relative error {err:e}", case.name))?;
        if err > worst.0 {
            worst = (err, case.name);
        }
    }
    let covered: Vec<&str> = catalogue().iter().map(|c| c.name).collect();
    for kind in catalogue_kinds() {
        ensure(covered.contains(&kind), || format!("op {kind} not checked"))?;
    }
    within(t.elapsed(), 60, "gradient suite")?;
    Ok(format!("{} cases, worst {:.1e} ({})", covered.len(), worst.0, worst.1))
}

fn c2_architecture() -> Result<String, String> {
    // Written out from the published layer sizes: 4 Bi-LSTM layers
    // (64, 64, 32, 32 per direction), FC 16 + tanh, projection to 3; or
    // 2 conv blocks (kernel 3, 256 filters, dropout 0.1), projection to 3.
    let input = 32 + 8 + 1;
    let mut rnn: Vec<(String, Vec<usize>)> = vec![
        ("phone_embedding".into(), vec![32, 32]),
        ("style_embedding".into(), vec![8, 8]),
    ];
    let mut width = input;
    for (l, h) in [64usize, 64, 32, 32].into_iter().enumerate() {
        for dir in ["fwd", "bwd"] {
            rnn.push((format!("lstm{l}.{dir}.w_ih"), vec![width, 4 * h]));
            rnn.push((format!("lstm{l}.{dir}.w_hh"), vec![h, 4 * h]));
            rnn.push((format!("lstm{l}.{dir}.bias"), vec![4 * h]));
        }
        width = 2 * h;
    }
    rnn.extend([
        ("fc.weight".into(), vec![64, 16]),
        ("fc.bias".into(), vec![16]),
        ("proj.weight".into(), vec![16, 3]),
        ("proj.bias".into(), vec![3]),
    ]);
    let mut conv: Vec<(String, Vec<usize>)> = vec![
        ("phone_embedding".into(), vec![32, 32]),
        ("style_embedding".into(), vec![8, 8]),
    ];
    for (b, cin) in [input, 256].into_iter().enumerate() {
        conv.push((format!("conv{b}.weight"), vec![3, cin, 256]));
        conv.push((format!("conv{b}.bias"), vec![256]));
        conv.push((format!("conv{b}.ln_gain"), vec![256]));
        conv.push((format!("conv{b}.ln_bias"), vec![256]));
    }
    conv.push(("proj.weight".into(), vec![256, 3]));
    conv.push(("proj.bias".into(), vec![3]));

    let mut counts = Vec::new();
    for (arch, want) in [(Architecture::Recurrent, rnn), (Architecture::Convolutional, conv)] {
        let model = AfpModel::build(arch, 1, ModelDims::default());
        let got: BTreeMap<String, Vec<usize>> =
            model.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
        let want: BTreeMap<String, Vec<usize>> = want.into_iter().collect();
        ensure(got == want, || format!("{arch:?} manifest differs:\n got {got:?}\nwant {want:?}"))?;
        let corpus = gen_corpus(&CorpusConfig { train_size: 1, val_size: 1, test_size: 1, ..Default::default() }, 1)
            .map_err(|e| e.to_string())?;
        let u = &corpus.test[0];
        let out = model.predict(&AfpInput::new(&u.phones, u.style_id)).map_err(|e| e.to_string())?;
        ensure(out.len() == u.len() && OUTPUT_DIM == 3, || "prediction is not 3 features per phone".into())?;
        counts.push(model.parameter_count());
    }
    ensure(CONV_DROPOUT == 0.1, || format!("conv dropout {CONV_DROPOUT}"))?;
    Ok(format!("parameters: recurrent {}, convolutional {}", counts[0], counts[1]))
}

fn c3_training() -> Result<String, String> {
    let t = Instant::now();
    let mut notes = Vec::new();
    // Noise-free corpus at the corpus module's default size; see README.
    let clean = gen_corpus(&CorpusConfig { noise_sigma: 0.0, ..Default::default() }, 20_240_917).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 5000,
        eval_every: 100,
        target_val_loss: Some(0.05),
        ..TrainConfig::default()
    };
    for arch in [Architecture::Recurrent, Architecture::Convolutional] {
        let ck = train(AfpModel::build(arch, 1, ModelDims::default()), &clean, &cfg, |_| {}).map_err(|e| e.to_string())?;
        let m = &ck.meta;
        ensure(m.final_val_loss < 0.05, || format!("{arch:?} σ=0: val {:.4} after {} iterations", m.final_val_loss, m.iterations))?;
        notes.push(format!("{} σ=0 val {:.4} @ {} it", arch.short_name(), m.final_val_loss, m.iterations));
    }
    // Default corpus (σ = 0.3), same iteration cap; stop once the loss has halved.
    let noisy = gen_corpus(&CorpusConfig::default(), 20_240_917).map_err(|e| e.to_string())?;
    for arch in [Architecture::Recurrent, Architecture::Convolutional] {
        let model = AfpModel::build(arch, 1, ModelDims::default());
        let initial = validation_loss(&model, &noisy.val).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            target_val_loss: Some(0.5 * initial),
            ..cfg.clone()
        };
        let ck = train(model, &noisy, &cfg, |_| {}).map_err(|e| e.to_string())?;
        let m = &ck.meta;
        ensure(m.final_val_loss <= 0.5 * m.initial_val_loss, || {
            format!("{arch:?} σ=0.3: val {:.4} from {:.4} after {} iterations", m.final_val_loss, m.initial_val_loss, m.iterations)
        })?;
        notes.push(format!(
            "{} σ=0.3 val {:.3} -> {:.3} ({:.0}% drop) @ {} it",
            arch.short_name(),
            m.initial_val_loss,
            m.final_val_loss,
            100.0 * (1.0 - m.final_val_loss / m.initial_val_loss),
            m.iterations
        ));
    }
    within(t.elapsed(), 600, "training checks")?;
    Ok(notes.join("; "))
}

fn c4_variance() -> Result<String, String> {
    let mut r = rng(40);
    for i in 0..100 {
        let (frames, cols) = (r.gen_range(2..60), r.gen_range(1..30));
        let m = FeatureMatrix {
            kind: MatrixKind::Mfcc,
            frames: (0..frames).map(|_| (0..cols).map(|_| r.gen_range(-50.0..50.0)).collect()).collect(),
        };
        let want: f64 = (0..cols)
            .map(|c| two_pass_variance(&m.frames.iter().map(|f| f[c]).collect::<Vec<_>>()).unwrap())
            .sum();
        let got = gv_of(&m, GvNormalization::SumOfVariances).map_err(|e| e.0)?;
        ensure(rel_close(got, want, 1e-9), || format!("gv instance {i}: {got} vs {want}"))?;

        let n = r.gen_range(1..200);
        let pf: Vec<PitchFrame> = (0..n)
            .map(|j| {
                let voiced = j == 0 || r.gen_bool(0.6);
                PitchFrame { f0_hz: if voiced { r.gen_range(50.0..500.0) } else { 0.0 }, voiced, nccf: 0.5 }
            })
            .collect();
        let voiced: Vec<f64> = pf.iter().filter(|f| f.voiced).map(|f| f.f0_hz).collect();
        let got = f0_variance(&PitchTrack { frames: pf }).map_err(|e| e.to_string())?;
        let want = two_pass_variance(&voiced).unwrap();
        ensure(rel_close(got, want, 1e-9) || (got - want).abs() < 1e-9, || format!("f0_variance {i}: {got} vs {want}"))?;

        let n = r.gen_range(2..50);
        let mut t = ProsodyTargets {
            f0_z: (0..n).map(|_| r.gen_range(-3.0..3.0)).collect(),
            energy_z: vec![0.0; n],
            logdur_z: vec![0.0; n],
            voiced_mask: (0..n).map(|_| r.gen_bool(0.5)).collect(),
        };
        t.voiced_mask[0] = true;
        t.voiced_mask[1] = true;
        let want = two_pass_variance(&t.voiced_f0().collect::<Vec<_>>()).unwrap();
        let got = afp_f0_score(&Rendition::from_features("u", 0, t, 0, RenderSettings::default())).map_err(|e| e.0)?;
        ensure(rel_close(got, want, 1e-9), || format!("afp_f0 {i}: {got} vs {want}"))?;
    }
    Ok("100 instances each of gv, f0_variance, afp_f0".into())
}

fn c5_pitch() -> Result<String, String> {
    let mut notes = Vec::new();
    for f in [120.0, 220.0, 330.0] {
        let track = track_pitch(&Waveform::new(sine(f, 1.0, 0.5)), &PitchConfig::default()).map_err(|e| e.to_string())?;
        let n = track.frames.len();
        let interior: Vec<f64> = track.frames[3..n - 3].iter().filter(|x| x.voiced).map(|x| x.f0_hz).collect();
        ensure(interior.len() * 2 > n, || format!("{f} Hz: only {} voiced interior frames", interior.len()))?;
        let m = median(interior);
        let err = (m - f).abs() / f;
        ensure(err < 0.02, || format!("{f} Hz tracked at {m:.2}"))?;
        notes.push(format!("{f} Hz err {:.3}%", 100.0 * err));
    }
    let track = track_pitch(&Waveform::new(white_noise(1.0, 1)), &PitchConfig::default()).map_err(|e| e.to_string())?;
    let unvoiced = track.frames.iter().filter(|f| !f.voiced).count() as f64 / track.frames.len() as f64;
    ensure(unvoiced >= 0.9, || format!("white noise only {:.0}% unvoiced", 100.0 * unvoiced))?;
    notes.push(format!("noise {:.0}% unvoiced", 100.0 * unvoiced));
    let mut r = rng(50);
    let costs = TransitionCosts::default();
    for i in 0..2000 {
        let lattice = random_lattice(&mut r, 6, 4);
        let (path, cost) = viterbi(&lattice, &costs);
        let (best, best_cost) = brute_force_path(&lattice, &costs);
        ensure(path == best && (cost - best_cost).abs() < 1e-12, || {
            format!("lattice {i}: dp {path:?}/{cost} vs exhaustive {best:?}/{best_cost}")
        })?;
    }
    notes.push("DP = exhaustive on 2000 lattices".into());
    Ok(notes.join("; "))
}

fn c6_statistics() -> Result<String, String> {
    let mut r = rng(60);
    for _ in 0..200 {
        let (r1, r2) = (r.gen_range(0..=40u64), r.gen_range(0..=40u64));
        let (a, c) = (r.gen_range(0..=r1), r.gen_range(0..=r2));
        let t = [[a, r1 - a], [c, r2 - c]];
        let got = fisher_exact_two_sided(t.map(|row| row.map(|v| v as i64))).map_err(|e| e.to_string())?;
        let want = fisher_enumeration(t);
        ensure((got - want).abs() < 1e-9, || format!("fisher {t:?}: {got} vs {want}"))?;
    }
    for _ in 0..200 {
        let n = r.gen_range(1..=100u64);
        let k = r.gen_range(0..=n);
        let got = binomial_two_sided(k, n, 0.5).map_err(|e| e.to_string())?;
        let want = binomial_direct(k, n, 0.5);
        ensure((got - want).abs() < 1e-12, || format!("binomial {k}/{n}: {got} vs {want}"))?;
    }
    let holm = holm_bonferroni(&[0.01, 0.04]);
    ensure((holm[0] - 0.02).abs() < 1e-15 && (holm[1] - 0.04).abs() < 1e-15, || format!("holm {holm:?}"))?;
    let holm3 = holm_bonferroni(&[0.03, 0.01, 0.02]);
    ensure(holm3.iter().zip([0.04, 0.03, 0.04]).all(|(g, w)| (g - w).abs() < 1e-15), || format!("holm {holm3:?}"))?;
    Ok("200 Fisher tables, 200 binomial tests, Holm vectors".into())
}

fn c7_protocol() -> Result<String, String> {
    let mut r = rng(70);
    for set in 0..1000 {
        let utts = r.gen_range(1..=8);
        let listeners = r.gen_range(1..=9);
        let records: Vec<PreferenceRecord> = (0..utts)
            .flat_map(|u| (0..listeners).map(move |l| (u, l)))
            .map(|(u, l)| PreferenceRecord {
                utterance_id: format!("u{u}"),
                listener_id: l,
                choice: [Choice::A, Choice::B, Choice::Undecided][r.gen_range(0..3)],
            })
            .collect();
        let oracle = oracle_accuracy(&records);
        let total = records.len() as u64;
        ensure(oracle.accuracy.considered + oracle.accuracy.excluded == total, || format!("set {set}: oracle accounting"))?;
        let included = oracle.included();
        for mask in 0..(1u32 << utts) {
            let choices: BTreeMap<String, usize> =
                (0..utts).map(|u| (format!("u{u}"), ((mask >> u) & 1) as usize)).collect();
            let a = accuracy(&choices, &records, Some(&included)).map_err(|e| e.to_string())?;
            ensure(a.considered + a.excluded == total, || format!("set {set}: accounting"))?;
            if let (Some(x), Some(o)) = (a.rate, oracle.accuracy.rate) {
                ensure(x <= o + 1e-15, || format!("set {set}: selector {mask:b} {x} > oracle {o}"))?;
            }
        }
    }
    let pairs: Vec<ProxyPair> = (0..30)
        .map(|i| ProxyPair { utterance_id: format!("u{i:02}"), values: [i as f64, 15.0] })
        .collect();
    let panel = PanelConfig { listeners: 30, undecided_margin: 0.0, ..PanelConfig::default() };
    let mut records = simulate_preferences(&pairs, &panel, 1).map_err(|e| e.to_string())?;
    ensure(records.len() == 900, || format!("{} records", records.len()))?;
    for rec in records.iter_mut().step_by(3).take(292) {
        rec.choice = Choice::Undecided;
    }
    let ids: BTreeMap<String, usize> = pairs.iter().map(|p| (p.utterance_id.clone(), 0)).collect();
    let a = accuracy(&ids, &records, None).map_err(|e| e.to_string())?;
    ensure(a.considered == 608 && a.excluded == 292, || format!("{a:?}"))?;
    Ok("oracle dominance on 1000 record sets; 900 records, 292 undecided -> 608 considered".into())
}

fn scoring_cost(kind: CriterionKind) -> Result<(u64, StageCounters), String> {
    let corpus = gen_corpus(&CorpusConfig { train_size: 1, val_size: 1, test_size: 10, ..Default::default() }, 8)
        .map_err(|e| e.to_string())?;
    let models = [
        AfpModel::build(Architecture::Recurrent, 1, ModelDims::default()),
        AfpModel::build(Architecture::Convolutional, 2, ModelDims::default()),
    ];
    let mut total = StageCounters::default();
    for (k, u) in corpus.test.iter().enumerate() {
        let input = AfpInput::new(&u.phones, u.style_id);
        let r: Vec<Rendition> = (0..2)
            .map(|i| Rendition::predict(&u.id, i, &models[i], &input, k as u64, RenderSettings::default()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        select([&r[0], &r[1]], CriterionSpec::new(kind, Polarity::Highest)).map_err(|e| e.to_string())?;
        total += r[0].counters();
        total += r[1].counters();
    }
    Ok((corpus.test.len() as u64, total))
}

fn c8_cost() -> Result<String, String> {
    let (n, afp) = scoring_cost(CriterionKind::AfpF0)?;
    let n = n as usize;
    ensure(afp.synth_calls + afp.mel_calls + afp.pitch_calls == 0, || format!("AFP-F0 {afp:?}"))?;
    let (_, gv) = scoring_cost(CriterionKind::Gv)?;
    ensure(gv.synth_calls == 2 * n && gv.mel_calls == 2 * n && gv.pitch_calls == 0, || format!("GV {gv:?}"))?;
    let (_, wav) = scoring_cost(CriterionKind::WavF0)?;
    ensure(wav.synth_calls == 2 * n && wav.pitch_calls == 2 * n && wav.mel_calls == 0, || format!("WAV-F0 {wav:?}"))?;
    let (dir, results) = smoke_run()?;
    let report = std::fs::read_to_string(dir.join("report.md")).map_err(|e| e.to_string())?;
    let ratio = report
        .lines()
        .find(|l| l.starts_with("Wall-clock ratio"))
        .ok_or("report has no wall-clock ratio line")?;
    let afp_cost = &results.costs["rnn-conv"]["afp-f0/highest"].counters;
    ensure(afp_cost.synth_calls == 0 && afp_cost.pitch_calls == 0 && afp_cost.mel_calls == 0, || {
        format!("pipeline AFP-F0 cost {afp_cost:?}")
    })?;
    Ok(format!("counters exact over {n} pairs; {}", ratio.trim_start_matches("Wall-clock ratio to AFP-F0 on the study ensemble:").trim()))
}

static SMOKE: OnceLock<Result<(PathBuf, RunResults, Duration), String>> = OnceLock::new();

fn smoke_run() -> Result<(PathBuf, RunResults), String> {
    let r = SMOKE.get_or_init(|| {
        let dir = tempfile::Builder::new().prefix("acceptance-run").tempdir().map_err(|e| e.to_string())?.keep();
        let config = RunConfig::for_profile(Profile::Smoke);
        let t = Instant::now();
        let results = evaluate(&config, &Workspace::new(&dir)).map_err(|e| e.to_string())?;
        Ok((dir, results, t.elapsed()))
    });
    r.clone().map(|(d, res, _)| (d, res))
}

fn c9_simulation() -> Result<String, String> {
    let (_, r) = smoke_run()?;
    let elapsed = SMOKE.get().and_then(|x| x.as_ref().ok()).map(|x| x.2).unwrap_or_default();
    within(elapsed, 900, "smoke evaluate")?;
    let s = &r.study;
    let afp = s.criterion("afp-f0/highest").ok_or("no afp-f0/highest outcome")?;
    let rate = afp.accuracy.rate.ok_or("no decided responses")?;
    ensure(rate > 0.5 && afp.p_vs_chance <= 0.05, || format!("AFP-F0 accuracy {rate:.3}, p {:.4}", afp.p_vs_chance))?;
    let gap = afp.gap_closure.ok_or("oracle does not beat the baseline")?;
    ensure(gap >= 0.3, || format!("gap closure {gap:.3}"))?;
    let control = r.negative_control.as_ref().ok_or("no negative control")?;
    let c = control.criterion("afp-f0/highest").ok_or("no control outcome")?;
    let (lo, hi) = proportion_ci_95(c.accuracy.matched, c.accuracy.considered, control.ci_method);
    ensure(lo <= 0.5 && 0.5 <= hi, || format!("random-proxy control CI [{lo:.3}, {hi:.3}] excludes 0.5"))?;
    Ok(format!(
        "AFP-F0 {:.3} (p {:.1e}), baseline {:.3}, oracle {:.3}, gap closure {:.2}; control {:.3} CI [{lo:.3}, {hi:.3}]; undecided {}/{}; {:.0}s",
        rate,
        afp.p_vs_chance,
        s.baseline().rate.unwrap_or(f64::NAN),
        s.oracle.rate.unwrap_or(f64::NAN),
        gap,
        c.accuracy.rate.unwrap_or(f64::NAN),
        s.undecided_records,
        s.total_records,
        elapsed.as_secs_f64()
    ))
}

fn c10_determinism() -> Result<String, String> {
    let (first, _) = smoke_run()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = RunConfig::for_profile(Profile::Smoke);
    config.workers = 2;
    evaluate(&config, &Workspace::new(dir.path())).map_err(|e| e.to_string())?;
    let a = std::fs::read(first.join("results.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.path().join("results.json")).map_err(|e| e.to_string())?;
    ensure(a == b, || "results.json differs between runs".into())?;
    let _ = std::fs::remove_dir_all(&first);
    Ok(format!("results.json identical ({} bytes), second run with 2 workers", a.len()))
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("gradient suite", c1_gradients),
        ("architecture fidelity", c2_architecture),
        ("training", c3_training),
        ("variance oracles", c4_variance),
        ("pitch tracker oracles", c5_pitch),
        ("statistics oracles", c6_statistics),
        ("protocol invariants", c7_protocol),
        ("cost ordering", c8_cost),
        ("end-to-end simulation", c9_simulation),
        ("determinism", c10_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
