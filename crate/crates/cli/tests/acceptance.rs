//! Acceptance suite. Prints one PASS/FAIL line per criterion with its
//! runtime against the limit, and exits nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pvdiag::corrupt::{self, CorruptionKind, CorruptionSpec, SeverityTable};
use pvdiag::curate::{self, AugmentPlan, QuotaPolicy, SplitSpec};
use pvdiag::eval::{self, LabeledPrediction};
use pvdiag::raster::{MemoryImageStore, Raster};
use pvdiag::report::{
    self, AnswerBlock, DiagnosticReport, LintCode, ProbabilityField, ReportSpans, Step, ThinkBlock,
};
use pvdiag::reward;
use pvdiag::rl::{self, Bandit, GaeConfig, PpoConfig, TabularSequencePolicy, Transition};
use pvdiag::seeding::rng_for;
use pvdiag::taxonomy::{DatasetManifest, SampleRecord};
use pvdiag::tta::{self, ViewKind, ViewPrediction, ViewPredictor};
use pvdiag::{DefectClass, Modality, Split};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use common::{el_cell, run_ok, s, snapshot, write_corpus};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn class(i: usize) -> DefectClass {
    DefectClass::from_index(i).unwrap()
}

fn other_class<R: Rng>(c: DefectClass, rng: &mut R) -> DefectClass {
    let k = rng.random_range(1..DefectClass::COUNT);
    class((c.index() + k) % DefectClass::COUNT)
}

// ---------------------------------------------------------------- reward

fn report_text(class: &str, steps: usize, probs: Option<&str>, close_answer: bool) -> String {
    let mut t = String::from("<think>\n");
    for i in 1..=steps {
        t.push_str(&format!("Step {i}: inspect region {i} of the cell\n"));
    }
    t.push_str(&format!("</think>\n<answer>\nclass: {class}\n"));
    if let Some(p) = probs {
        t.push_str(&format!("probabilities: {p}\n"));
    }
    t.push_str("root_cause: thermal stress\nvisual_evidence: dark line across the cell\nrecommended_action: replace module\n");
    if close_answer {
        t.push_str("</answer>\n");
    }
    t
}

fn reward_exactness() -> Result<String, String> {
    let gt = DefectClass::Crack;
    let valid = Some("crack=0.900, finger=0.100");
    let cases: [(&str, String, [f64; 4], f64); 4] = [
        ("correct/7/valid", report_text("crack", 7, valid, true), [1.0, 0.5, 0.3, 0.0], 1.0),
        ("wrong/7/valid", report_text("finger", 7, valid, true), [-1.0, 0.5, 0.3, 0.0], -0.2),
        ("wrong/0/none/open", report_text("finger", 0, None, false), [-1.0, 0.0, 0.0, -0.5], -1.0),
        ("correct/3/valid", report_text("crack", 3, valid, true), [1.0, 0.5 * 3.0 / 7.0, 0.3, -0.5], 1.0),
    ];
    for (name, text, parts, total) in &cases {
        let b = reward::score(text, gt);
        let got = [b.r_cls, b.r_steps, b.r_prob, b.r_pen];
        for (g, w) in got.iter().zip(parts) {
            ensure((g - w).abs() <= 1e-9, || format!("{name}: components {got:?}, want {parts:?}"))?;
        }
        ensure((b.total - total).abs() <= 1e-9, || format!("{name}: total {} want {total}", b.total))?;
    }

    // Fuzz with a generator that knows the components it wrote.
    let mut rng = rng_for(1001, &[]);
    let n = 100_000;
    let mut pairs = Vec::with_capacity(n);
    let mut expected = Vec::with_capacity(n);
    let mut correct_flags = Vec::with_capacity(n);
    for _ in 0..n {
        let truth = class(rng.random_range(0..DefectClass::COUNT));
        let correct = rng.random_bool(0.5);
        let predicted = if correct { truth } else { other_class(truth, &mut rng) };
        let steps = rng.random_range(0..=12usize);
        let close = rng.random_bool(0.8);
        let (probs, prob_ok) = match rng.random_range(0..5) {
            0 => (None, false),
            1 => ("very likely".to_string().into(), false),
            kind => {
                let target: i64 = match kind {
                    2 => 1000 + rng.random_range(-10..=10),
                    3 => 1000 + rng.random_range(11..=300),
                    _ => 1000 - rng.random_range(11..=300),
                };
                let k = rng.random_range(1..=4usize).min(DefectClass::COUNT);
                let mut classes: Vec<usize> = (0..DefectClass::COUNT).collect();
                classes.shuffle(&mut rng);
                let mut cuts: Vec<i64> = (0..k - 1).map(|_| rng.random_range(0..=target)).collect();
                cuts.sort();
                let mut values = Vec::with_capacity(k);
                let mut prev = 0;
                for c in cuts.into_iter().chain([target]) {
                    values.push(c - prev);
                    prev = c;
                }
                let ok = (target - 1000).abs() <= 10 && values.iter().all(|&v| (0..=1000).contains(&v));
                let text = classes[..k]
                    .iter()
                    .zip(&values)
                    .map(|(&c, &v)| format!("{}={}.{:03}", class(c), v / 1000, v % 1000))
                    .collect::<Vec<_>>()
                    .join(", ");
                (Some(text), ok)
            }
        };
        let text = report_text(&predicted.to_string(), steps, probs.as_deref(), close);
        let r_cls = if correct { 1.0 } else { -1.0 };
        let r_steps = 0.5 * steps.min(7) as f64 / 7.0;
        let r_prob = if prob_ok { 0.3 } else { 0.0 };
        let r_pen = if !close || steps < 4 { -0.5 } else { 0.0 };
        expected.push((r_cls + r_steps + r_prob + r_pen).clamp(-1.0, 1.0));
        correct_flags.push(correct);
        pairs.push((text, truth));
    }
    let scored = reward::score_batch(&pairs);
    let (mut min_correct, mut max_wrong) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, b) in scored.iter().enumerate() {
        ensure((b.total - expected[i]).abs() <= 1e-9, || {
            format!("fuzz #{i}: total {} != derived {}\n{}", b.total, expected[i], pairs[i].0)
        })?;
        ensure((-1.0..=1.0).contains(&b.total), || format!("fuzz #{i}: total {} out of bounds", b.total))?;
        if correct_flags[i] {
            min_correct = min_correct.min(b.total);
        } else {
            max_wrong = max_wrong.max(b.total);
        }
    }
    ensure(min_correct >= 0.5, || format!("min correct-class total {min_correct}"))?;
    ensure(max_wrong <= -0.2 + 1e-12, || format!("max wrong-class total {max_wrong}"))?;
    Ok(format!("4 examples exact; {n} fuzzed: min correct {min_correct:.4}, max wrong {max_wrong:.4}"))
}

// ---------------------------------------------------------------- RLOO

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rloo_bandit(rewards: &[f64], logits: &[f64], seed: u64) -> Result<String, String> {
    let v = rewards.len();
    let env = Bandit::new(rewards.to_vec());
    let mut policy = TabularSequencePolicy::new(v, 1);
    policy.theta_mut()[..v].copy_from_slice(logits);
    let exact = rl::exact_gradient(&policy, &env);

    let p = softmax(logits);
    let mean_r: f64 = p.iter().zip(rewards).map(|(a, b)| a * b).sum();
    let mut closed = vec![0.0; policy.n_params()];
    for a in 0..v {
        closed[a] = p[a] * (rewards[a] - mean_r);
    }
    for (i, (e, c)) in exact.iter().zip(&closed).enumerate() {
        ensure((e - c).abs() <= 1e-12, || format!("enumeration {e} vs closed form {c} at {i}"))?;
    }

    let groups = 100_000u64;
    let d = policy.n_params();
    let (mut sum, mut sumsq) = (vec![0.0; d], vec![0.0; d]);
    for g in 0..groups {
        let mut rng = rng_for(seed, &[g]);
        let group = rl::sample_group(&policy, &env, 6, g, &mut rng);
        let grad = rl::rloo_gradient(&policy, &[group]).map_err(|e| e.to_string())?;
        for j in 0..d {
            sum[j] += grad[j];
            sumsq[j] += grad[j] * grad[j];
        }
    }
    let n = groups as f64;
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = ((sumsq[j] - n * mean * mean) / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        if se == 0.0 {
            ensure(mean == exact[j], || format!("coordinate {j}: zero variance but mean {mean} != {}", exact[j]))?;
            continue;
        }
        let z = (mean - exact[j]).abs() / se;
        worst = worst.max(z);
        ensure(z <= 3.0, || format!("coordinate {j}: mean {mean:.6} exact {:.6} ({z:.2} SE)", exact[j]))?;
    }
    Ok(format!("{v}-arm worst {worst:.2} SE"))
}

fn rloo_algebra() -> Result<String, String> {
    let mut rng = rng_for(2002, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let k = rng.random_range(2..=8);
        let r: Vec<f64> = (0..k)
            .map(|_| if rng.random_bool(0.3) { rng.random_range(0..=1) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let a = rl::rloo_advantages(&r).map_err(|e| e.to_string())?;
        let sum: f64 = a.iter().sum();
        worst = worst.max(sum.abs());
        ensure(sum.abs() < 1e-12, || format!("advantages of {r:?} sum to {sum:e}"))?;
    }
    let two = rloo_bandit(&[1.0, 0.0], &[0.4, -0.3], 2003)?;
    let three = rloo_bandit(&[1.0, 0.5, 0.0], &[0.2, -0.5, 0.6], 2004)?;
    Ok(format!("max |Σa| {worst:.1e} over 1e4 vectors; 1e5 groups K=6: {two}, {three}"))
}

// ---------------------------------------------------------------- PPO / GAE / KL

fn log_softmax(z: &[f64], a: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[a] - lse
}

fn surrogate(theta: &[f64], vocab: usize, trs: &[Transition], old: &[f64], adv: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for ((tr, o), a) in trs.iter().zip(old).zip(adv) {
        let row = &theta[tr.state * vocab..(tr.state + 1) * vocab];
        let ratio = (log_softmax(row, tr.action) - o).exp();
        total += (ratio * a).min(ratio.clamp(1.0 - eps, 1.0 + eps) * a);
    }
    total / trs.len() as f64
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ppo_gae_kl() -> Result<String, String> {
    let mut rng = rng_for(3003, &[]);
    let h = 1e-5;
    let (mut accepted, mut worst, mut clipped) = (0, 0.0f64, 0usize);
    while accepted < 100 {
        let vocab = rng.random_range(2..=4);
        let horizon = rng.random_range(1..=3);
        let mut policy = TabularSequencePolicy::new(vocab, horizon);
        for t in policy.theta_mut() {
            *t = rng.sample::<f64, _>(StandardNormal);
        }
        let mut trs = Vec::new();
        for _ in 0..rng.random_range(1..=6) {
            let y = policy.sample(&mut rng);
            trs.extend(rl::transitions_of(&policy, &y));
        }
        let old: Vec<f64> = trs
            .iter()
            .map(|tr| policy.log_prob_action(tr.state, tr.action) + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let adv: Vec<f64> = trs.iter().map(|_| rng.sample(StandardNormal)).collect();
        let eps = rng.random_range(0.1..0.3);
        let ratios: Vec<f64> =
            trs.iter().zip(&old).map(|(tr, o)| (policy.log_prob_action(tr.state, tr.action) - o).exp()).collect();
        // Finite differences are meaningless across the clip kinks.
        if ratios.iter().any(|r| (r - (1.0 - eps)).abs() < 1e-3 || (r - (1.0 + eps)).abs() < 1e-3) {
            continue;
        }
        clipped += ratios.iter().filter(|r| **r < 1.0 - eps || **r > 1.0 + eps).count();
        let config = PpoConfig { clip_eps: eps, ..PpoConfig::default() };
        let (value, grad) = rl::ppo_objective(&policy, &old, &trs, &adv, &config).map_err(|e| e.to_string())?;
        let theta = policy.theta().to_vec();
        let reference = surrogate(&theta, vocab, &trs, &old, &adv, eps);
        ensure((value - reference).abs() <= 1e-12, || format!("objective {value} vs reference {reference}"))?;
        let mut fd = vec![0.0; theta.len()];
        for j in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += h;
            minus[j] -= h;
            fd[j] = (surrogate(&plus, vocab, &trs, &old, &adv, eps) - surrogate(&minus, vocab, &trs, &old, &adv, eps))
                / (2.0 * h);
        }
        let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&grad).max(norm(&fd)).max(1e-8);
        worst = worst.max(rel);
        ensure(rel < 1e-4, || format!("instance {accepted}: relative error {rel:e}"))?;
        accepted += 1;
    }

    // GAE reductions.
    let mut gae_worst: f64 = 0.0;
    for i in 0..1000 {
        let t_len = rng.random_range(1..=20);
        let r: Vec<f64> = (0..t_len).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..=t_len).map(|_| rng.sample(StandardNormal)).collect();
        let gamma = if i % 2 == 0 { 1.0 } else { rng.random_range(0.0..=1.0) };
        let td = rl::gae(&r, &v, &GaeConfig { gamma, lambda: 0.0 }).map_err(|e| e.to_string())?;
        let mc = rl::gae(&r, &v, &GaeConfig { gamma, lambda: 1.0 }).map_err(|e| e.to_string())?;
        for t in 0..t_len {
            let delta = r[t] + gamma * v[t + 1] - v[t];
            let mut ret = gamma.powi((t_len - t) as i32) * v[t_len];
            for s in t..t_len {
                ret += gamma.powi((s - t) as i32) * r[s];
            }
            let e0 = (td[t] - delta).abs();
            let e1 = (mc[t] - (ret - v[t])).abs();
            gae_worst = gae_worst.max(e0).max(e1);
            ensure(e0 <= 1e-10 && e1 <= 1e-10, || format!("gae instance {i} t={t}: errors {e0:e}, {e1:e}"))?;
        }
    }
    let ex = rl::gae(&[0.0, 1.0], &[0.5, 0.5, 0.0], &GaeConfig { gamma: 0.9, lambda: 0.95 }).map_err(|e| e.to_string())?;
    ensure((ex[0] - 0.3775).abs() <= 1e-12 && (ex[1] - 0.5).abs() <= 1e-12, || format!("worked example gave {ex:?}"))?;

    // KL objective at the reference policy.
    let mut kl_worst: f64 = 0.0;
    for _ in 0..100 {
        let mut policy = TabularSequencePolicy::new(3, 2);
        for t in policy.theta_mut() {
            *t = rng.sample::<f64, _>(StandardNormal);
        }
        let samples: Vec<Vec<usize>> = (0..rng.random_range(1..=50)).map(|_| policy.sample(&mut rng)).collect();
        let rewards: Vec<f64> = samples.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = rng.random_range(0.0..1.0);
        let j = rl::kl_regularized_objective(&policy, &policy.clone(), &samples, &rewards, beta)
            .map_err(|e| e.to_string())?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        kl_worst = kl_worst.max((j - mean).abs());
        ensure((j - mean).abs() <= 1e-12, || format!("KL objective {j} vs mean reward {mean}"))?;
    }
    Ok(format!(
        "PPO worst rel err {worst:.1e} (100 instances, {clipped} clipped terms); GAE worst {gae_worst:.1e}; \
         example 0.3775; KL worst {kl_worst:.1e}"
    ))
}

// ---------------------------------------------------------------- rl-sim

fn read_trace(dir: &Path) -> Result<(String, Vec<f64>), String> {
    let text = std::fs::read_to_string(dir.join("trace.csv")).map_err(|e| e.to_string())?;
    let values = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| format!("bad trace line `{l}`")))
        .collect::<Result<Vec<f64>, String>>()?;
    Ok((text, values))
}

fn rl_convergence() -> Result<String, String> {
    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for method in ["rloo", "ppo"] {
        let mut traces = Vec::new();
        for rep in 0..2 {
            let out = t.path().join(format!("{method}_{rep}"));
            run_ok(&["rl-sim", "--method", method, "--env", "bandit2", "--steps", "500", "--seed", "17", "--out", s(&out)]);
            traces.push(read_trace(&out)?);
        }
        ensure(traces[0].0 == traces[1].0, || format!("{method}: traces differ between identical runs"))?;
        let values = &traces[0].1;
        ensure(values.len() == 501, || format!("{method}: {} trace points", values.len()))?;
        let first = values.iter().position(|&v| v >= 0.95);
        let last = *values.last().unwrap();
        ensure(first.is_some() && last >= 0.95, || format!("{method}: final expected reward {last:.4}"))?;
        notes.push(format!("{method} ≥0.95 at step {} (final {last:.4})", first.unwrap()));
    }
    Ok(format!("{}; reruns identical", notes.join(", ")))
}

// ---------------------------------------------------------------- TTA

fn plurality(crops: &[DefectClass]) -> Option<DefectClass> {
    let mut counts: HashMap<DefectClass, usize> = HashMap::new();
    for &c in crops {
        *counts.entry(c).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    let leaders: Vec<DefectClass> = counts.iter().filter(|(_, &n)| n == best).map(|(&c, _)| c).collect();
    (leaders.len() == 1).then(|| leaders[0])
}

fn oracle_rule(v: &[DefectClass; 6]) -> (DefectClass, &'static str) {
    let full = v[0];
    if full != DefectClass::CleanPanel && v[1..].iter().any(|&c| c == full) {
        return (full, "FullDefectConfirmed");
    }
    match plurality(&v[1..]) {
        Some(m) if full == DefectClass::CleanPanel && m != DefectClass::CleanPanel => (m, "DefectOverridesClean"),
        Some(m) => (m, "CropMajority"),
        None => (full, "FullTiebreak"),
    }
}

struct Lookup([DefectClass; 6]);

impl ViewPredictor for Lookup {
    fn predict(&self, view: ViewKind, _image: &Raster) -> Result<ViewPrediction, String> {
        Ok(ViewPrediction::new(view, self.0[view.index()]))
    }
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|i| p.contains(&i)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn tta_table() -> Result<String, String> {
    use DefectClass::*;
    // View order: Full, Center, TopLeft, TopRight, BottomLeft, BottomRight.
    let corner_slots = [2usize, 3, 4, 5];
    let perms = permutations4();
    let mut rules: BTreeMap<&str, usize> = BTreeMap::new();
    let total = DefectClass::COUNT.pow(6);
    for code in 0..total {
        let mut c = code;
        let v: [DefectClass; 6] = std::array::from_fn(|_| {
            let k = c % DefectClass::COUNT;
            c /= DefectClass::COUNT;
            class(k)
        });
        let (out, rule) = tta::decide(&v);
        let (want, want_rule) = oracle_rule(&v);
        let rule_name = format!("{rule:?}");
        ensure(out == want && rule_name == want_rule, || {
            format!("{v:?}: got {out:?}/{rule_name}, oracle {want:?}/{want_rule}")
        })?;
        *rules.entry(want_rule).or_default() += 1;
        // (a)
        ensure(v.contains(&out), || format!("(a) {v:?} -> {out:?}"))?;
        // (b)
        if v[0].is_defect() && v[1..].contains(&v[0]) {
            ensure(out == v[0], || format!("(b) {v:?} -> {out:?}"))?;
        }
        // (c)
        if v[0] == CleanPanel {
            if let Some(m) = plurality(&v[1..]).filter(|m| m.is_defect()) {
                ensure(out == m, || format!("(c) {v:?} -> {out:?}"))?;
            }
        }
        // (d)
        for p in &perms {
            let mut w = v;
            for (i, &slot) in corner_slots.iter().enumerate() {
                w[slot] = v[corner_slots[p[i]]];
            }
            ensure(tta::decide(&w) == (out, rule), || format!("(d) {v:?} vs {w:?}"))?;
        }
    }

    let traces: [([DefectClass; 6], DefectClass, &str, f64); 3] = [
        ([CleanPanel, Crack, Crack, Crack, CleanPanel, CleanPanel], Crack, "DefectOverridesClean", 3.0 / 6.0),
        ([Crack, CleanPanel, CleanPanel, CleanPanel, CleanPanel, Crack], Crack, "FullDefectConfirmed", 2.0 / 6.0),
        ([Finger, Crack, Crack, ThickLine, ThickLine, CleanPanel], Finger, "FullTiebreak", 1.0 / 6.0),
    ];
    let image = Raster::filled(32, 32, 1, 0.5);
    for (views, want, want_rule, conf) in &traces {
        let preds: Vec<ViewPrediction> =
            ViewKind::ALL.iter().map(|&k| ViewPrediction::new(k, views[k.index()])).collect();
        let by_aggregate = tta::aggregate(&preds).map_err(|e| e.to_string())?;
        let by_run = tta::run_tta(&image, &Lookup(*views)).map_err(|e| e.to_string())?;
        for d in [&by_aggregate, &by_run] {
            let rule = format!("{:?}", d.rule_fired);
            ensure(d.final_class == *want && rule == *want_rule && (d.confidence - conf).abs() <= 1e-12, || {
                format!("trace {views:?}: {:?}/{rule}/{}", d.final_class, d.confidence)
            })?;
        }
    }
    let counts = rules.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ");
    Ok(format!("{total} assignments × 24 corner permutations match oracle ({counts}); 3 traces exact"))
}

// ---------------------------------------------------------------- AURC

fn labeled(conf: &[f64], correct: &[bool]) -> Vec<LabeledPrediction> {
    conf.iter()
        .zip(correct)
        .enumerate()
        .map(|(i, (&c, &ok))| LabeledPrediction {
            id: format!("p{i}"),
            true_class: DefectClass::Crack,
            predicted_class: if ok { DefectClass::Crack } else { DefectClass::Finger },
            confidence: c,
        })
        .collect()
}

/// Recounts errors among the top k from scratch for every k.
fn brute_curve(conf: &[f64], correct: &[bool]) -> (Vec<(f64, f64)>, f64) {
    let n = conf.len();
    let rank: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| conf[j] > conf[i] || (conf[j] == conf[i] && j < i)).count())
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut sum = 0.0;
    for k in 1..=n {
        let errors = (0..n).filter(|&i| rank[i] < k && !correct[i]).count();
        let risk = errors as f64 / k as f64;
        sum += risk;
        points.push((k as f64 / n as f64, risk));
    }
    (points, sum / n as f64)
}

fn for_each_permutation(items: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        for_each_permutation(items, k + 1, f);
        items.swap(k, i);
    }
}

fn aurc_oracle() -> Result<String, String> {
    let mut rng = rng_for(4004, &[]);
    let mut ulp_gap: f64 = 0.0;
    for inst in 0..1000 {
        let n = rng.random_range(1..=500);
        let p_ok = rng.random_range(0.0..=1.0);
        let tied = inst % 2 == 0;
        let conf: Vec<f64> = (0..n)
            .map(|_| if tied { rng.random_range(0..=10) as f64 / 10.0 } else { rng.random_range(0.0..=1.0) })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(p_ok)).collect();
        let preds = labeled(&conf, &correct);
        let curve = eval::risk_coverage(&preds).map_err(|e| e.to_string())?;
        let (points, aurc) = brute_curve(&conf, &correct);
        ensure(curve.points.len() == n, || format!("instance {inst}: {} points", curve.points.len()))?;
        for (k, (p, (c, r))) in curve.points.iter().zip(&points).enumerate() {
            ensure(p.coverage == *c && p.risk == *r, || {
                format!("instance {inst} k={}: ({}, {}) vs brute ({c}, {r})", k + 1, p.coverage, p.risk)
            })?;
        }
        ensure(curve.aurc == aurc, || format!("instance {inst}: aurc {} vs brute {aurc}", curve.aurc))?;
        let errors = correct.iter().filter(|&&ok| !ok).count();
        let r1 = eval::risk_at_coverage(&curve, 1.0).map_err(|e| e.to_string())?;
        ensure(r1 == errors as f64 / n as f64, || format!("instance {inst}: risk(1.0) {r1} vs {errors}/{n}"))?;
        let acc = eval::classification_metrics(&preds).map_err(|e| e.to_string())?.accuracy;
        ulp_gap = ulp_gap.max((r1 - (1.0 - acc)).abs());
    }
    ensure(ulp_gap <= f64::EPSILON, || format!("risk(1.0) vs 1 - accuracy gap {ulp_gap:e}"))?;

    // Perfect ranking is minimal among every ordering.
    let mut perms_checked = 0usize;
    for n in 1..=8usize {
        for errors in 0..=n {
            let correct: Vec<bool> = (0..n).map(|i| i < n - errors).collect();
            let descending = |order: &[usize]| -> Vec<f64> {
                let mut conf = vec![0.0; n];
                for (rank, &i) in order.iter().enumerate() {
                    conf[i] = 1.0 - rank as f64 / n as f64;
                }
                conf
            };
            let identity: Vec<usize> = (0..n).collect();
            let best = eval::risk_coverage(&labeled(&descending(&identity), &correct)).unwrap().aurc;
            let mut min_other = f64::INFINITY;
            let mut items = identity.clone();
            for_each_permutation(&mut items, 0, &mut |order| {
                let a = eval::risk_coverage(&labeled(&descending(order), &correct)).unwrap().aurc;
                min_other = min_other.min(a);
                perms_checked += 1;
            });
            ensure(best <= min_other, || format!("n={n} errors={errors}: perfect {best} > {min_other}"))?;
        }
    }

    // Equal-confidence blocks with constant correctness.
    for inst in 0..200 {
        let n = rng.random_range(1..=200);
        let levels = rng.random_range(1..=6);
        let level_ok: Vec<bool> = (0..levels).map(|_| rng.random_bool(0.5)).collect();
        let lv: Vec<usize> = (0..n).map(|_| rng.random_range(0..levels)).collect();
        let conf: Vec<f64> = lv.iter().map(|&l| (l + 1) as f64 / (levels + 1) as f64).collect();
        let correct: Vec<bool> = lv.iter().map(|&l| level_ok[l]).collect();
        let a = eval::risk_coverage(&labeled(&conf, &correct)).unwrap().aurc;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let conf2: Vec<f64> = idx.iter().map(|&i| conf[i]).collect();
        let correct2: Vec<bool> = idx.iter().map(|&i| correct[i]).collect();
        let b = eval::risk_coverage(&labeled(&conf2, &correct2)).unwrap().aurc;
        ensure(a == b, || format!("block instance {inst}: {a} vs {b}"))?;
    }
    Ok(format!(
        "1000 instances exact vs brute force; risk(1.0) = errors/n exactly (max gap to 1-accuracy {ulp_gap:.1e}); \
         {perms_checked} orderings for n≤8; 200 block shuffles invariant"
    ))
}

// ---------------------------------------------------------------- curation

fn record(id: String, label: DefectClass, modality: Modality, provenance: &str) -> SampleRecord {
    SampleRecord {
        path: format!("{id}.png"),
        id,
        modality,
        label,
        split: Split::Unassigned,
        provenance: provenance.to_string(),
        augmentation_tag: None,
    }
}

fn stratum(out: &mut Vec<SampleRecord>, label: DefectClass, modality: Modality, provenance: &str, n: usize) {
    for i in 0..n {
        out.push(record(format!("{provenance}_{label}_{modality}_{i}"), label, modality, provenance));
    }
}

fn curation() -> Result<String, String> {
    use DefectClass::*;
    let mut records = Vec::new();
    stratum(&mut records, Crack, Modality::El, "src_a", 3000);
    stratum(&mut records, Crack, Modality::Thermal, "src_b", 280);
    stratum(&mut records, Crack, Modality::Rgb, "src_c", 1194);
    stratum(&mut records, Finger, Modality::El, "src_a", 500);
    stratum(&mut records, CleanPanel, Modality::Thermal, "src_b", 120);
    let m = DatasetManifest { records };
    let policy = QuotaPolicy { class: Crack, retention_fraction: 0.4 };
    let (out, warnings) = curate::undersample(&m, &policy, 5005).map_err(|e| e.to_string())?;
    ensure(warnings.is_empty(), || format!("warnings {warnings:?}"))?;
    for (prov, modality, size, want) in [("src_a", Modality::El, 3000, 1200), ("src_b", Modality::Thermal, 280, 112), ("src_c", Modality::Rgb, 1194, 478)] {
        let got = out.records.iter().filter(|r| r.label == Crack && r.provenance == prov && r.modality == modality).count();
        // round-half-up of 40% in integer arithmetic
        let derived = (4 * size + 5) / 10;
        ensure(got == want && got == derived, || format!("{prov}: {size} -> {got}, want {want}"))?;
    }
    let untouched = |m: &DatasetManifest| m.records.iter().filter(|r| r.label != Crack).cloned().collect::<Vec<_>>();
    ensure(untouched(&m) == untouched(&out), || "non-target classes changed".into())?;
    let input_ids: std::collections::HashSet<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    ensure(out.records.iter().all(|r| input_ids.contains(r.id.as_str())), || "output not a subset".into())?;
    let again = curate::undersample(&m, &policy, 5005).map_err(|e| e.to_string())?.0;
    ensure(again == out, || "undersampling not deterministic".into())?;

    // Split deviation on random strata.
    let mut rng = rng_for(5006, &[]);
    let spec_fracs = [0.70, 0.15, 0.15];
    let mut strata_checked = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let mut records = Vec::new();
        for c in 0..DefectClass::COUNT {
            for (mi, modality) in Modality::ALL.iter().enumerate() {
                if rng.random_bool(0.5) {
                    stratum(&mut records, class(c), *modality, &format!("t{trial}m{mi}"), rng.random_range(0..=400));
                }
            }
        }
        let m = DatasetManifest { records };
        let spec = SplitSpec { seed: rng.random(), ..SplitSpec::default() };
        let split = curate::split(&m, &spec).map_err(|e| e.to_string())?;
        ensure(split == curate::split(&m, &spec).unwrap(), || "split not deterministic".into())?;
        let mut counts: BTreeMap<(DefectClass, Modality), [usize; 3]> = BTreeMap::new();
        for r in &split.records {
            let slot = counts.entry((r.label, r.modality)).or_default();
            match r.split {
                Split::Train => slot[0] += 1,
                Split::Val => slot[1] += 1,
                Split::Test => slot[2] += 1,
                Split::Unassigned => return Err(format!("{} left unassigned", r.id)),
            }
        }
        for (key, c) in counts {
            let n: usize = c.iter().sum();
            for (got, f) in c.iter().zip(spec_fracs) {
                let dev = (*got as f64 - f * n as f64).abs();
                worst = worst.max(dev);
                ensure(dev <= 1.0, || format!("{key:?}: counts {c:?} for n={n}"))?;
            }
            strata_checked += 1;
        }
    }

    // Augmentation leak prevention.
    let store = MemoryImageStore::new();
    let mut records = Vec::new();
    for (i, (modality, prov)) in [(Modality::El, "lk_a"); 10].into_iter().chain([(Modality::Thermal, "lk_b"); 5]).enumerate() {
        let r = record(format!("bc{i}"), BlackCore, modality, prov);
        store.insert(&r.path, el_cell(24, 24, BlackCore, i as u64));
        records.push(r);
    }
    for i in 0..30 {
        let r = record(format!("fg{i}"), Finger, Modality::El, "lk_a");
        store.insert(&r.path, el_cell(24, 24, Finger, i));
        records.push(r);
    }
    let m = DatasetManifest { records };
    let before: Vec<Raster> = m.records.iter().map(|r| store.get(&r.path).unwrap()).collect();
    let plan = AugmentPlan { target_min: 60, target_max: 70, ..AugmentPlan::default() };
    let aug = curate::augment_class(&m, BlackCore, &plan, 5007, &store).map_err(|e| e.to_string())?;
    let n_bc = aug.manifest.count_class(BlackCore);
    ensure((60..=70).contains(&n_bc), || format!("black_core count {n_bc} outside band"))?;
    for (r, img) in m.records.iter().zip(&before) {
        ensure(store.get(&r.path).as_ref() == Some(img), || format!("source {} modified", r.id))?;
    }
    let split = curate::split(&aug.manifest, &SplitSpec { seed: 5008, ..SplitSpec::default() }).map_err(|e| e.to_string())?;
    curate::check_augmentation_provenance(&split).map_err(|e| e.to_string())?;
    let by_id: HashMap<&str, &SampleRecord> = split.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut aug_count = 0;
    for r in split.records.iter().filter(|r| r.augmentation_tag.is_some()) {
        let tag = r.augmentation_tag.as_deref().unwrap();
        let src_id = tag.split(';').find_map(|kv| kv.strip_prefix("src=")).ok_or_else(|| format!("tag `{tag}`"))?;
        let src = by_id.get(src_id).ok_or_else(|| format!("{}: source {src_id} missing", r.id))?;
        ensure(src.augmentation_tag.is_none(), || format!("{}: source is itself synthetic", r.id))?;
        ensure(src.split == r.split && src.modality == r.modality && src.provenance == r.provenance, || {
            format!("{}: {:?} but source {src_id} in {:?}", r.id, r.split, src.split)
        })?;
        ensure(store.get(&r.path).is_some(), || format!("{}: image not written", r.id))?;
        aug_count += 1;
    }
    // Negative control: a moved synthetic record is caught.
    let mut leaked = split.clone();
    let victim = leaked.records.iter_mut().find(|r| r.augmentation_tag.is_some()).unwrap();
    victim.split = if victim.split == Split::Test { Split::Train } else { Split::Test };
    ensure(curate::check_augmentation_provenance(&leaked).is_err(), || "leak not detected".into())?;

    Ok(format!(
        "3000→1200, 280→112, 1194→478, others untouched; {strata_checked} random strata max deviation {worst:.3}; \
         {aug_count} synthetic records share source split, leak control detected"
    ))
}

// ---------------------------------------------------------------- corruption

fn variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn corruption_stats() -> Result<String, String> {
    let table = SeverityTable::default();
    let gray = Raster::filled(128, 128, 1, 0.5);
    let mut notes = Vec::new();
    for sev in 1..=5u8 {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev, 6006).map_err(|e| e.to_string())?;
        let want = table.noise_variance[sev as usize - 1];
        let field = corrupt::noise_field(&gray, &spec, &table);
        let v = variance(field.iter().copied());
        ensure((v / want - 1.0).abs() <= 0.10, || format!("s{sev}: added variance {v:.5} vs {want}"))?;
        let out = corrupt::corrupt(&gray, &spec, &table).map_err(|e| e.to_string())?;
        // The field is what corrupt() adds before clipping.
        for ((o, i), z) in out.data().iter().zip(gray.data()).zip(&field) {
            let expect = (*i as f64 + z).clamp(0.0, 1.0);
            ensure((*o as f64 - expect).abs() <= 1e-6, || format!("s{sev}: output {o} vs clip(in + noise) {expect}"))?;
        }
        let post = variance(out.data().iter().zip(gray.data()).map(|(o, i)| (o - i) as f64));
        if sev == 1 {
            ensure((post / want - 1.0).abs() <= 0.10, || format!("s1 output variance {post:.5}"))?;
        }
        notes.push(format!("s{sev} {v:.4}/{want} (clipped {post:.4})"));
    }

    // Severity monotonicity and reruns on EL-like fixtures.
    let fixtures: Vec<Raster> = DefectClass::ALL.iter().enumerate().map(|(i, &c)| el_cell(96, 96, c, 600 + i as u64)).collect();
    let mut violations = Vec::new();
    let mut monotone = Vec::new();
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::GaussianBlur, CorruptionKind::Geometric] {
        let mut ok_fixtures = 0;
        for (fi, img) in fixtures.iter().enumerate() {
            let mut prev = 0.0;
            let mut ok = true;
            for sev in 1..=5u8 {
                let spec = CorruptionSpec::new(kind, sev, 6007).unwrap();
                let a = corrupt::corrupt(img, &spec, &table).map_err(|e| e.to_string())?;
                let b = corrupt::corrupt(img, &spec, &table).map_err(|e| e.to_string())?;
                let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure(same && a.width() == img.width() && a.height() == img.height(), || {
                    format!("{kind:?} s{sev} fixture {fi}: rerun differs or size changed")
                })?;
                let mse = a.mse(img);
                if mse < prev {
                    ok = false;
                    violations.push(format!("{kind:?} fixture {fi} s{}→s{sev}: {prev:.5}→{mse:.5}", sev - 1));
                }
                prev = mse;
            }
            ok_fixtures += usize::from(ok);
        }
        monotone.push(format!("{kind:?} {ok_fixtures}/{}", fixtures.len()));
    }
    let monotone = monotone.join(", ");
    ensure(violations.is_empty(), || {
        format!("MSE monotone per fixture: {monotone}; {} decreases, first: {}", violations.len(), violations[..3.min(violations.len())].join("; "))
    })?;

    let store = MemoryImageStore::new();
    let mut records = Vec::new();
    for (i, img) in fixtures.iter().enumerate() {
        let r = record(format!("fx{i}"), DefectClass::ALL[i], Modality::El, "fx");
        store.insert(&r.path, img.clone());
        records.push(r);
    }
    let m = DatasetManifest { records };
    let spec = CorruptionSpec::new(CorruptionKind::Geometric, 3, 6008).unwrap();
    let a = corrupt::corrupt_manifest(&m, &spec, &table, &store, "c1").map_err(|e| e.to_string())?;
    let b = corrupt::corrupt_manifest(&m, &spec, &table, &store, "c2").map_err(|e| e.to_string())?;
    ensure(a.failures.is_empty() && a.records.len() == m.len(), || "manifest corruption failed".into())?;
    ensure(a.to_jsonl().replace("c1/", "c2/") == b.to_jsonl(), || "manifest reruns differ".into())?;
    for r in &m.records {
        let x = store.get(&corrupt::corrupted_path("c1", &spec, &r.id)).unwrap();
        let y = store.get(&corrupt::corrupted_path("c2", &spec, &r.id)).unwrap();
        ensure(x == y, || format!("{}: rerun image differs", r.id))?;
    }
    Ok(format!("noise variance {}; MSE monotone per fixture: {monotone}; reruns bit-identical", notes.join(", ")))
}

// ---------------------------------------------------------------- report grammar

const WORDS: &[&str] = &[
    "dark", "region", "busbar", "cell", "edge", "bright", "uniform", "pattern", "crack", "line", "corner",
    "emission", "contact", "gradient", "visible", "low", "high", "intensity", "border", "spot",
];

fn sentence<R: Rng>(rng: &mut R) -> String {
    (0..rng.random_range(1..8)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn random_report<R: Rng>(rng: &mut R) -> DiagnosticReport {
    let steps = (0..rng.random_range(0..10)).map(|i| Step { index: i + 1, text: sentence(rng) }).collect();
    let probabilities = if rng.random_bool(0.2) {
        ProbabilityField::Absent
    } else {
        let mut m = BTreeMap::new();
        for _ in 0..rng.random_range(1..5) {
            m.insert(class(rng.random_range(0..DefectClass::COUNT)), rng.random_range(0..=1000u32) as f64 / 1000.0);
        }
        ProbabilityField::Parsed(m)
    };
    let opt = |rng: &mut R| rng.random_bool(0.8).then(|| sentence(rng));
    DiagnosticReport {
        think: ThinkBlock { steps, free_text: String::new() },
        answer: AnswerBlock {
            predicted_class: class(rng.random_range(0..DefectClass::COUNT)),
            probabilities,
            root_cause: opt(rng),
            visual_evidence: opt(rng),
            recommended_action: opt(rng),
            free_text: String::new(),
        },
        raw_text: String::new(),
        spans: ReportSpans::default(),
    }
}

fn report_grammar() -> Result<String, String> {
    let mut rng = rng_for(7007, &[]);
    for i in 0..10_000 {
        let r = random_report(&mut rng);
        let text = report::serialize(&r);
        let parsed = report::parse_report(&text).map_err(|e| format!("report {i}: {e}\n{text}"))?;
        ensure(parsed == r, || format!("report {i}: fields changed\n{text}"))?;
        ensure(report::serialize(&parsed) == text, || format!("report {i}: text changed"))?;
    }
    let fires = |probs: &str| {
        report::validate_text(&report_text("crack", 7, Some(probs), true)).iter().any(|f| f.code == LintCode::ProbSumViolation)
    };
    let over = "crack=0.700, finger=0.350";
    ensure(fires(over), || "ProbSumViolation missing at 105%".into())?;
    ensure(reward::score(&report_text("crack", 7, Some(over), true), DefectClass::Crack).r_prob == 0.0, || {
        "105% report still earns the probability bonus".into()
    })?;
    for ok in ["crack=0.690, finger=0.300", "crack=0.700, finger=0.300", "crack=0.710, finger=0.300"] {
        ensure(!fires(ok), || format!("ProbSumViolation fired on `{ok}`"))?;
    }
    for bad in ["crack=0.680, finger=0.300", "crack=0.720, finger=0.300"] {
        ensure(fires(bad), || format!("ProbSumViolation silent on `{bad}`"))?;
    }
    Ok("10000 generated reports round-trip; fires at 1.05, 0.98, 1.02; silent at 0.99, 1.00, 1.01".into())
}

// ---------------------------------------------------------------- end to end

const E2E_CORPUS: &[(&str, &str, &str, DefectClass, usize)] = &[
    ("ds_a", "el", "crack", DefectClass::Crack, 120),
    ("ds_a", "el", "finger", DefectClass::Finger, 60),
    ("ds_a", "el", "clean_panel", DefectClass::CleanPanel, 90),
    ("ds_a", "el", "black_core", DefectClass::BlackCore, 8),
    ("ds_a", "el", "thick_line", DefectClass::ThickLine, 50),
    ("ds_b", "thermal", "crack", DefectClass::Crack, 40),
    ("ds_b", "thermal", "clean_panel", DefectClass::CleanPanel, 50),
];

fn pipeline(root: &Path) -> Result<(), String> {
    let raw = root.join("raw");
    let plan = root.join("plan.toml");
    let (cur, cor, sim, ev) = (root.join("curate"), root.join("corrupt"), root.join("simulate"), root.join("eval"));
    run_ok(&[
        "curate", "--scan", s(&raw), "--quota", "crack=0.4", "--augment", "black_core", "--plan", s(&plan),
        "--seed", "23", "--out", s(&cur),
    ]);
    run_ok(&[
        "corrupt", "--manifest", s(&cur.join("manifest.jsonl")), "--image-root", s(&raw), "--image-root", s(&cur),
        "--kind", "noise", "--severity", "1", "--split", "test", "--seed", "23", "--out", s(&cor),
    ]);
    run_ok(&[
        "simulate", "--manifest", s(&cor.join("manifest.jsonl")), "--image-root", s(&cor), "--accuracy", "0.6",
        "--seed", "23", "--out", s(&sim),
    ]);
    run_ok(&["eval", "--predictions", s(&sim.join("predictions.jsonl")), "--plot", "--out", s(&ev)]);
    Ok(())
}

fn end_to_end() -> Result<String, String> {
    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = t.path();
    write_corpus(&root.join("raw"), E2E_CORPUS, 48);
    std::fs::write(root.join("plan.toml"), "target_min = 24\ntarget_max = 28\n").map_err(|e| e.to_string())?;

    pipeline(root)?;
    let first = snapshot(root, &["provenance.json"]);
    pipeline(root)?;
    let second = snapshot(root, &["provenance.json"]);
    let differing: Vec<_> = first.iter().filter(|(k, v)| second.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty() && first.len() == second.len(), || format!("rerun differs: {differing:?}"))?;

    let eval_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/eval.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let n = eval_json["n"].as_u64().unwrap_or(0);
    let risks: Vec<f64> = ["0.5", "0.7", "0.9", "1.0"]
        .iter()
        .map(|c| eval_json["risk_at_coverage"][*c].as_f64().ok_or_else(|| format!("risk at {c} missing")))
        .collect::<Result<_, _>>()?;
    ensure(n >= 30, || format!("only {n} test predictions"))?;
    ensure(risks.windows(2).all(|w| w[0] <= w[1]), || format!("risk at 0.5/0.7/0.9/1.0 not monotone: {risks:?}"))?;
    let aurc = eval_json["aurc"].as_f64().unwrap_or(f64::NAN);
    Ok(format!(
        "{n} test images; risk@0.5/0.7/0.9/1.0 = {:.3}/{:.3}/{:.3}/{:.3}, aurc {aurc:.3}; {} files byte-identical on rerun",
        risks[0],
        risks[1],
        risks[2],
        risks[3],
        first.len()
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, u64, Check); 10] = [
        ("reward exactness", 10, reward_exactness),
        ("RLOO algebra and unbiasedness", 120, rloo_algebra),
        ("PPO/GAE numerics", 60, ppo_gae_kl),
        ("toy RL convergence", 60, rl_convergence),
        ("TTA decision table", 30, tta_table),
        ("AURC oracle equivalence", 60, aurc_oracle),
        ("curation quotas", 30, curation),
        ("corruption statistics", 60, corruption_stats),
        ("report grammar", 30, report_grammar),
        ("end-to-end determinism", 120, end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, limit, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(limit);
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("over time limit; {d}")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {name} [{:.2}s / {limit}s] {detail}", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
