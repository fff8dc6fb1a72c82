//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the verdicts always reach the
//! terminal. A FAIL is reported, not raised: the process exits 0 unless the
//! harness itself breaks. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 1 9 10`. Setting
//! `ACCEPTANCE_QUICK=1` shrinks seeds and training budgets for a fast smoke
//! pass; those verdicts are tagged `(quick)` and do not count.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use conftransfer::config::RunConfig;
use conftransfer::demo::{
    label_confidence, min_max_labels, parse_composition, parse_jsonl, resolve_composition, to_jsonl, Calibration,
    generate_dataset,
};
use conftransfer::env::{make_env_pair, oracle_check, EnvPair, PairConfig, PairId};
use conftransfer::evalstats::{
    median, paired_sign_test, run_ablation, run_varying_composition, score_confidence_predictor, seed_data,
    t_test, Experiment, ImitateHyper, MethodId, EvalConfig, Compositions,
};
use conftransfer::imitate::{
    gail_disc_loss, load_policy, save_policy, train_bc_unweighted, train_weighted_bc, weight_dataset, BcHyper,
    GailDiscriminator, WeightSource,
};
use conftransfer::nn::{sigmoid, weighted_mse_loss, Matrix};
use conftransfer::par::Execution;
use conftransfer::seed;
use conftransfer::transfer::{
    fit, load_model, optimal_discriminator, save_model, train_discriminator, train_source, train_transfer,
    TransferHyper, TransferModel, INDISTINGUISHABLE,
};
use conftransfer::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn quick() -> bool {
    std::env::var("ACCEPTANCE_QUICK").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn seeds(full: u64) -> Vec<u64> {
    (0..if quick() { 2 } else { full }).collect()
}

fn transfer_hyper() -> TransferHyper {
    let h = TransferHyper::default();
    if quick() {
        TransferHyper { stage1_steps: 500, stage2_steps: 300, ..h }
    } else {
        h
    }
}

fn imitate_hyper() -> ImitateHyper {
    let mut h = ImitateHyper::default();
    if quick() {
        h.bc.steps = 300;
    }
    h
}

fn eval_config() -> EvalConfig {
    EvalConfig { rollouts: if quick() { 10 } else { 100 }, ..EvalConfig::default() }
}

fn experiment(pair: PairId, compositions: Compositions, seeds: Vec<u64>) -> Experiment {
    Experiment {
        pair: PairConfig::new(pair),
        compositions,
        transfer: transfer_hyper(),
        imitate: imitate_hyper(),
        eval: eval_config(),
        seeds,
    }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed.as_secs_f64() < budget_s as f64
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("undefined".into(), |v| format!("{v:.3}"))
}

fn c1_gradients() -> Result<Verdict> {
    let start = Instant::now();
    let cases = 200u64;
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for c in 0..cases {
        let (name, err) = common::gradient_case(seed::derive(c, "acceptance_grad"));
        if err > worst || err.is_nan() {
            worst = err;
            worst_name = name;
        }
    }
    let t = start.elapsed();
    Ok(verdict(
        worst < 1e-4 && within(t, 30),
        format!("{cases} configurations, max relative error {worst:.2e} ({worst_name}), {:.1}s", t.as_secs_f64()),
    ))
}

fn one_hot_latents(p: &[f64], latent: usize, n: usize) -> Matrix {
    let mut rows = Vec::new();
    for (i, &pi) in p.iter().enumerate() {
        let mut z = vec![0.0; latent];
        z[i] = 1.0;
        rows.extend(std::iter::repeat_n(z, (pi * n as f64).round() as usize));
    }
    Matrix::from_rows(&rows).unwrap()
}

fn c2_equilibrium() -> Result<Verdict> {
    let start = Instant::now();
    let hyper = TransferHyper::default();
    let latent = hyper.latent_dim;
    let cases: [(&[f64], &[f64]); 2] = [
        (&[0.5, 0.3, 0.15, 0.05], &[0.1, 0.2, 0.3, 0.4]),
        (&[0.2, 0.2, 0.2, 0.2, 0.2], &[0.05, 0.15, 0.25, 0.25, 0.3]),
    ];
    let mut worst = 0.0f64;
    for (i, (ps, pt)) in cases.into_iter().enumerate() {
        let model = TransferModel::new(3, 3, &TransferHyper { seed: i as u64, ..hyper.clone() })?;
        let mut d = model.feat_discs[0].clone();
        train_discriminator(&mut d, &one_hot_latents(ps, latent, 2000), &one_hot_latents(pt, latent, 2000), 4000, 256, 3e-3, i as u64)?;
        let atoms = one_hot_latents(&vec![1.0 / ps.len() as f64; ps.len()], latent, ps.len());
        let logits = d.predict(&atoms)?;
        for (j, want) in optimal_discriminator(ps, pt)?.into_iter().enumerate() {
            worst = worst.max((sigmoid(logits.get(j, 0)) - want).abs());
        }
    }
    let p = [0.4, 0.35, 0.25];
    let model = TransferModel::new(3, 3, &TransferHyper { seed: 9, ..hyper })?;
    let mut d = model.feat_discs[0].clone();
    let data = one_hot_latents(&p, latent, 2000);
    let losses = train_discriminator(&mut d, &data, &data, 2000, 256, 3e-3, 9)?;
    let tail = &losses[losses.len() - 200..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let t = start.elapsed();
    Ok(verdict(
        worst < 0.05 && tail_mean >= INDISTINGUISHABLE - 0.15 && within(t, 60),
        format!(
            "max |D - D*| {worst:.4} (< 0.05), identical-input BCE {tail_mean:.4} (>= {:.4}), {:.1}s",
            INDISTINGUISHABLE - 0.15,
            t.as_secs_f64()
        ),
    ))
}

fn c3_correspondence() -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (id, tol) in [(PairId::LiftedLinear, 1e-9), (PairId::Identity, 1e-9), (PairId::TwinReacher, 1e-6)] {
        let pair = make_env_pair(id, &PairConfig::new(id))?;
        let report = oracle_check(&pair, 1000, 0)?;
        let v = if id == PairId::TwinReacher {
            println!(
                "    info: twin_reacher under H2-projected actions {:.2e}; the one-joint arm cannot always follow the two-joint distance change within |a| <= 0.3",
                report.max_violation_project
            );
            report.max_violation_lift
        } else {
            report.max_violation()
        };
        pass &= v < tol;
        parts.push(format!("{id:?} {v:.2e} (< {tol:.0e})"));
    }
    Ok(verdict(pass, parts.join(", ")))
}

fn recipe(pair: &EnvPair, source: bool) -> Result<Vec<(conftransfer::env::Grade, usize)>> {
    let env = if source { &pair.source } else { &pair.target };
    resolve_composition(env, &parse_composition("94-5-1")?, &Calibration::default())
}

fn c4_labels() -> Result<Verdict> {
    let mut checked = 0usize;
    let mut failures = Vec::new();
    let maps = [(1.0, 0.0), (3.5, -20.0), (0.01, 7.0), (250.0, 1e4)];
    for id in [PairId::LiftedLinear, PairId::Identity, PairId::TwinReacher] {
        let pair = make_env_pair(id, &PairConfig::new(id))?;
        for side in [true, false] {
            let env = if side { &pair.source } else { &pair.target };
            for s in 0..5 {
                let set = label_confidence(&generate_dataset(env, &recipe(&pair, side)?, s)?)?;
                if set.len() != 100 {
                    failures.push(format!("{id:?} produced {} trajectories", set.len()));
                }
                let labels: Vec<f64> = set.trajectories.iter().map(|t| t.confidence.unwrap()).collect();
                let returns = set.returns();
                let (lo, hi) = labels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| (a.min(c), b.max(c)));
                if (lo, hi) != (0.0, 1.0) {
                    failures.push(format!("{id:?} seed {s}: label range [{lo}, {hi}]"));
                }
                for (t, &c) in set.trajectories.iter().zip(&labels) {
                    let r = t.total_return;
                    let rmin = returns.iter().copied().fold(f64::INFINITY, f64::min);
                    let rmax = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if (r == rmin && c != 0.0) || (r == rmax && c != 1.0) {
                        failures.push(format!("{id:?} seed {s}: extreme return labeled {c}"));
                    }
                }
                for (a, b) in maps {
                    let moved: Vec<f64> = returns.iter().map(|r| a * r + b).collect();
                    let again = min_max_labels(&moved)?;
                    let dev = labels.iter().zip(&again).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    if dev >= 1e-9 {
                        failures.push(format!("{id:?} seed {s}: affine map ({a}, {b}) moved labels by {dev:.1e}"));
                    }
                }
                let weighted = weight_dataset(&set, WeightSource::Oracle)?;
                let mut row = 0;
                for (t, &c) in set.trajectories.iter().zip(&labels) {
                    if weighted.weights[row..row + t.len()].iter().any(|&w| w != c) {
                        failures.push(format!("{id:?} seed {s}: pair weights differ from trajectory label"));
                    }
                    row += t.len();
                }
                checked += set.len();
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{checked} labeled trajectories over 3 pairs x 2 sides x 5 seeds")
    } else {
        failures.into_iter().take(3).collect::<Vec<_>>().join("; ")
    };
    Ok(verdict(detail.starts_with(char::is_numeric), detail))
}

/// Held-out Spearman of a transfer fit per seed, as in the ablation runner.
fn identity_spearmans(hyper: &TransferHyper, seeds: &[u64]) -> Result<Vec<Option<f64>>> {
    let pair = make_env_pair(PairId::Identity, &PairConfig::new(PairId::Identity))?;
    let (src, tar) = (recipe(&pair, true)?, recipe(&pair, false)?);
    Execution::Parallel
        .map_slice(seeds, |&s| {
            let data = seed_data(&pair, &src, &tar, s)?;
            let h = TransferHyper { seed: seed::mix(hyper.seed, s), ..hyper.clone() };
            let model = fit(&data.source, &data.target.unlabeled(), &h)?.0;
            Ok(score_confidence_predictor(|t| model.predict_trajectory(t), &data.holdout)?.spearman)
        })
        .into_iter()
        .collect()
}

fn c5_identity() -> Result<Verdict> {
    let start = Instant::now();
    let seeds = seeds(10);
    let sp = identity_spearmans(&transfer_hyper(), &seeds)?;
    let t = start.elapsed();
    // undefined correlations count as zero
    let values: Vec<f64> = sp.iter().map(|s| s.unwrap_or(0.0)).collect();
    let med = median(&values).unwrap();
    let listed: Vec<String> = sp.iter().map(|&s| fmt_opt(s)).collect();

    let warm = identity_spearmans(&TransferHyper { init_target_from_source: true, ..transfer_hyper() }, &seeds)?;
    let warm_values: Vec<f64> = warm.iter().map(|s| s.unwrap_or(0.0)).collect();
    println!(
        "    info: with init_target_from_source the median is {:.3} [{}]",
        median(&warm_values).unwrap(),
        warm.iter().map(|&s| fmt_opt(s)).collect::<Vec<_>>().join(", ")
    );
    Ok(verdict(
        med >= 0.9 && within(t, 600),
        format!("median Spearman {med:.3} (>= 0.9) over {} seeds [{}], {:.0}s", seeds.len(), listed.join(", "), t.as_secs_f64()),
    ))
}

const CHAIN: [MethodId; 5] = [
    MethodId::Oracle,
    MethodId::Ours,
    MethodId::OursConfidence,
    MethodId::OursFeature,
    MethodId::GailUnweighted,
];

fn c6_c7_twin_reacher() -> Result<(Verdict, Verdict)> {
    let start = Instant::now();
    let exp = experiment(PairId::TwinReacher, Compositions::default(), seeds(10));
    let table = run_ablation(&exp, Execution::Parallel)?;
    let t = start.elapsed();
    let p = |hi: MethodId, lo: MethodId| table.p_values.get(&format!("{hi}_vs_{lo}")).copied().unwrap_or(f64::NAN);

    let means: Vec<String> = CHAIN.iter().map(|&m| format!("{m} {:.2}", table.mean_return(m))).collect();
    println!("    info: mean returns {}", means.join(", "));
    let (ours, gail) = (table.mean_return(MethodId::Ours), table.mean_return(MethodId::GailUnweighted));
    let headline_p = p(MethodId::Ours, MethodId::GailUnweighted);
    let headline = ours > gail && headline_p < 0.05;
    let mut inversions = Vec::new();
    let mut bad = false;
    for w in CHAIN.windows(2) {
        if table.mean_return(w[0]) < table.mean_return(w[1]) {
            let pv = p(w[0], w[1]);
            inversions.push(format!("{} < {} (p {pv:.3})", w[0], w[1]));
            bad |= pv < 0.05;
        }
    }
    let chain = !bad && inversions.len() <= 1;
    let c6 = verdict(
        headline && chain && within(t, 7200),
        format!(
            "ours - gail_unweighted {:.3} with p {headline_p:.3} (needs > 0 and p < 0.05); chain inversions [{}] (at most one, not significant); {:.0}s",
            ours - gail,
            inversions.join(", "),
            t.as_secs_f64()
        ),
    );

    let k5 = table.spearmans(MethodId::Ours);
    let k1 = table.spearmans(MethodId::OursConfidence);
    let (a, b): (Vec<f64>, Vec<f64>) = k5
        .iter()
        .zip(&k1)
        .map(|(x, y)| (x.unwrap_or(0.0), y.unwrap_or(0.0)))
        .unzip();
    let (wins, trials, sp) = paired_sign_test(&a, &b)?;
    let c7 = verdict(
        sp < 0.05,
        format!(
            "K=5 beats K=1 in {wins} of {trials} seeds, sign test p {sp:.4} (< 0.05); median Spearman K=5 {}, K=1 {}",
            fmt_opt(median(&a)),
            fmt_opt(median(&b))
        ),
    );
    Ok((c6, c7))
}

fn c8_varying() -> Result<Verdict> {
    let start = Instant::now();
    let exp = experiment(PairId::TwinReacher, Compositions::default(), seeds(5));
    let table = run_varying_composition(&exp, Execution::Parallel)?;
    let t = start.elapsed();
    let rows = table.summaries();
    for r in &rows {
        println!(
            "    info: {} mean return {:.2} (sd {:.2}), median Spearman {}",
            r.source_composition,
            r.mean_return,
            r.std_return,
            fmt_opt(r.median_spearman)
        );
    }
    let mut inversions = 0;
    let mut too_large = false;
    for w in rows.windows(2) {
        if w[1].mean_return > w[0].mean_return {
            inversions += 1;
            let pooled = ((w[0].std_return.powi(2) + w[1].std_return.powi(2)) / 2.0).sqrt();
            too_large |= w[1].mean_return - w[0].mean_return > pooled;
        }
    }
    let worst_sp = rows.iter().map(|r| r.median_spearman.unwrap_or(0.0)).fold(f64::INFINITY, f64::min);
    Ok(verdict(
        inversions <= 1 && !too_large && worst_sp > 0.7,
        format!(
            "{inversions} inversion(s) in mean return (at most one, within a pooled sd: {}), lowest row Spearman {worst_sp:.3} (> 0.7), {} seeds, {:.0}s",
            if too_large { "no" } else { "yes" },
            exp.seeds.len(),
            t.as_secs_f64()
        ),
    ))
}

fn c9_reductions() -> Result<Verdict> {
    let pair = make_env_pair(PairId::TwinReacher, &PairConfig::new(PairId::TwinReacher))?;
    let env = &pair.target;
    let set = generate_dataset(env, &recipe(&pair, false)?, 3)?;
    let bc = BcHyper { steps: 400, ..BcHyper::default() };

    let unit = weight_dataset(&set, WeightSource::Constant(1.0))?;
    let (weighted, _) = train_weighted_bc(env, &unit, &bc)?;
    let (plain, _) = train_bc_unweighted(env, &unit, &bc)?;
    let bc_identical = save_policy(&weighted) == save_policy(&plain) && weighted == plain;

    let src = label_confidence(&generate_dataset(&pair.source, &[(conftransfer::env::Grade::Random, 6), (conftransfer::env::Grade::Optimal, 6)], 1)?)?;
    let tar = set.unlabeled();
    let hyper = TransferHyper {
        lambda: 0.0,
        stage1_steps: 200,
        stage2_steps: 200,
        early_stop_window: 0,
        ..TransferHyper::default()
    };
    let mut a = TransferModel::for_sets(&src, &tar, &hyper)?;
    train_source(&mut a, &src)?;
    let mut b = a.clone();
    for d in &mut b.conf_discs {
        let scrambled: Vec<f64> = d.flat_params().iter().map(|v| -3.0 * v + 0.5).collect();
        d.set_flat_params(&scrambled)?;
    }
    train_transfer(&mut a, &src, &tar)?;
    train_transfer(&mut b, &src, &tar)?;
    let lambda_zero = a.e_tar == b.e_tar && a.feat_discs == b.feat_discs;

    let mut data = weight_dataset(&set, WeightSource::Constant(1.0))?;
    for (i, w) in data.weights.iter_mut().enumerate() {
        *w = if i % 7 == 0 { 0.0 } else { 0.5 + (i % 3) as f64 * 0.25 };
    }
    let zero: Vec<usize> = (0..data.len()).filter(|i| i % 7 == 0).collect();
    let mut moved = data.clone();
    for &i in &zero {
        for v in moved.states.row_mut(i).iter_mut().chain(moved.actions.row_mut(i).iter_mut()) {
            *v = -2.0 * *v + 1.5;
        }
    }
    let net = conftransfer::imitate::policy_network(env, &[16], 5)?;
    let bc_grads = |d: &conftransfer::imitate::WeightedDataset| -> Result<(f64, Vec<f64>, bool)> {
        let (pred, tape) = net.forward(&d.states)?;
        let (loss, g) = weighted_mse_loss(&pred, &d.actions, &d.weights)?;
        let rows_zero = zero.iter().all(|&i| g.row(i).iter().all(|&v| v == 0.0));
        Ok((loss, net.backward(tape, &g)?.0.to_flat(), rows_zero))
    };
    let (l0, g0, r0) = bc_grads(&data)?;
    let (l1, g1, r1) = bc_grads(&moved)?;
    let bc_zero = r0 && r1 && l0 == l1 && g0 == g1;

    let disc = GailDiscriminator::new(env.state_dim(), env.action_dim(), &[16], 2)?;
    let policy_batch = Matrix::from_rows(&(0..8).map(|i| data.inputs().row(i + 1).to_vec()).collect::<Vec<_>>())?;
    let a0 = gail_disc_loss(&disc, &policy_batch, &data.inputs(), &data.weights)?;
    let a1 = gail_disc_loss(&disc, &policy_batch, &moved.inputs(), &moved.weights)?;
    let gail_zero = a0.loss == a1.loss && a0.grads.to_flat() == a1.grads.to_flat();

    Ok(verdict(
        bc_identical && lambda_zero && bc_zero && gail_zero,
        format!(
            "unit-weight BC bitwise equal to unweighted BC: {bc_identical}; lambda = 0 makes E_tar independent of D'_k: {lambda_zero}; zero-weight pairs give exactly zero gradient (BC {bc_zero}, GAIL {gail_zero})"
        ),
    ))
}

fn cli(args: &[&str]) -> std::result::Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_conftransfer"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out.stdout)
}

fn cli_pipeline_is_reproducible(dir: &Path) -> std::result::Result<bool, String> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json");
    let cfg = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let p = |n: &str| dir.join(format!("{run}_{n}")).to_str().unwrap().to_string();
        let (src, tar, model, weighted, policy) = (p("src.jsonl"), p("tar.jsonl"), p("m.json"), p("w.jsonl"), p("pol.json"));
        cli(&["gen-demos", "--config", cfg, "--side", "source", "--out", &src])?;
        cli(&["gen-demos", "--config", cfg, "--side", "target", "--out", &tar])?;
        cli(&["train", "--config", cfg, "--src", &src, "--tar", &tar, "--out", &model])?;
        cli(&["predict", "--model", &model, "--demos", &tar, "--out", &weighted])?;
        cli(&["imitate", "--config", cfg, "--weighted", &weighted, "--out", &policy])?;
        let eval = cli(&["eval", "--config", cfg, "--policy", &policy, "--n", "10", "--seed", "3"])?;
        cli(&["experiment", "--config", cfg, "--out", &p("exp")])?;
        let mut bytes = Vec::new();
        for f in [&src, &tar, &model, &format!("{model}.metrics.jsonl"), &weighted, &policy] {
            bytes.push(std::fs::read(f).map_err(|e| e.to_string())?);
        }
        for f in ["ablation.csv", "predictor.csv", "p_values.json", "varying_composition.csv"] {
            bytes.push(std::fs::read(Path::new(&p("exp")).join(f)).map_err(|e| e.to_string())?);
        }
        bytes.push(eval);
        outputs.push(bytes);
    }
    Ok(outputs[0] == outputs[1])
}

fn c10_determinism() -> Result<Verdict> {
    let pair = make_env_pair(PairId::LiftedLinear, &PairConfig::new(PairId::LiftedLinear))?;
    let src = label_confidence(&generate_dataset(&pair.source, &recipe(&pair, true)?, 11)?)?;
    let tar = generate_dataset(&pair.target, &recipe(&pair, false)?, 12)?;
    let hyper = TransferHyper { stage1_steps: 300, stage2_steps: 300, ..TransferHyper::default() };
    let (m1, h1) = fit(&src, &tar, &hyper)?;
    let (m2, h2) = fit(&src, &tar, &hyper)?;
    let training = save_model(&m1) == save_model(&m2) && h1.metrics_jsonl(1) == h2.metrics_jsonl(1);

    let text = save_model(&m1);
    let back = load_model(&text)?;
    let model_rt = back == m1 && save_model(&back) == text;
    let mut data_rt = true;
    for set in [&src, &tar] {
        let t = to_jsonl(set)?;
        let again = parse_jsonl(&t, "memory")?;
        data_rt &= &again == set && to_jsonl(&again)? == t;
    }
    let weighted = weight_dataset(&tar, WeightSource::Predictor(&m1))?;
    let (policy, _) = train_weighted_bc(&pair.target, &weighted, &BcHyper { steps: 200, ..BcHyper::default() })?;
    let ptext = save_policy(&policy);
    let policy_back = load_policy(&ptext)?;
    let policy_rt = policy_back == policy && save_policy(&policy_back) == ptext;

    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json"))?;
    let exp = cfg.experiment();
    let ablation = run_ablation(&exp, Execution::Parallel)? == run_ablation(&exp, Execution::Sequential)?;

    let dir = tempfile::tempdir().expect("temporary directory");
    let commands = match cli_pipeline_is_reproducible(dir.path()) {
        Ok(same) => same,
        Err(e) => {
            println!("    info: command pipeline failed: {e}");
            false
        }
    };

    let p = t_test(&[2.1, 2.5, 2.3, 2.2], &[3.1, 3.3, 3.0, 3.2], false)?;
    let fixture = (p - 0.0002598173979013418).abs() < 1e-6;
    Ok(verdict(
        training && model_rt && data_rt && policy_rt && ablation && commands && fixture,
        format!(
            "training {training}, every command rerun byte-identical {commands}, ablation parallel = sequential {ablation}, round trips (checkpoint {model_rt}, datasets {data_rt}, policy {policy_rt}), t-test fixture p {p:.10} {fixture}"
        ),
    ))
}

fn guarded<T>(f: impl FnOnce() -> Result<T>) -> std::result::Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(format!("error: {e}")),
        Err(panic) => Err(format!(
            "panic: {}",
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn report(n: usize, v: std::result::Result<Verdict, String>, tally: &mut Vec<(usize, bool)>) {
    let tag = if quick() { " (quick)" } else { "" };
    let (pass, detail) = match v {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, e),
    };
    println!("criterion {n:>2}: {}{tag}  {detail}", if pass { "PASS" } else { "FAIL" });
    tally.push((n, pass));
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut tally = Vec::new();
    println!("acceptance criteria{}", if quick() { " (quick mode, verdicts not meaningful)" } else { "" });

    type Check = fn() -> Result<Verdict>;
    let early: [(usize, Check); 4] = [(1, c1_gradients), (2, c2_equilibrium), (3, c3_correspondence), (4, c4_labels)];
    for (n, f) in early {
        if want(n) {
            report(n, guarded(f), &mut tally);
        }
    }
    if want(5) {
        report(5, guarded(c5_identity), &mut tally);
    }
    if want(6) || want(7) {
        match guarded(c6_c7_twin_reacher) {
            Ok((c6, c7)) => {
                report(6, Ok(c6), &mut tally);
                report(7, Ok(c7), &mut tally);
            }
            Err(e) => {
                report(6, Err(e.clone()), &mut tally);
                report(7, Err(e), &mut tally);
            }
        }
    }
    let late: [(usize, Check); 3] = [(8, c8_varying), (9, c9_reductions), (10, c10_determinism)];
    for (n, f) in late {
        if want(n) {
            report(n, guarded(f), &mut tally);
        }
    }
    let passed = tally.iter().filter(|(_, p)| *p).count();
    println!("acceptance summary: {passed} of {} criteria pass", tally.len());
}
