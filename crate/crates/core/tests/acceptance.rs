//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedmi::bench::{run_experiment, RunConfig, FAIRNESS, ROUNDS};
use fedmi::calibration::{calibrate_mi, CalibrationConfig};
use fedmi::engine::{
    aggregate_fedavg, aggregate_qfedavg, local_train, ClientUpdate, Simulation, TAG_INIT, TAG_PERSONAL,
};
use fedmi::fairness::{jfi, shapley_contributions, ShapleyMode};
use fedmi::mi_losses::{bound_on_tape, log_partition_on_tape, regularized_loss_on_tape, LossKind, MiLossConfig};
use fedmi::models::{ClassifierConfig, ConvStack, ModelSpec};
use fedmi::ndmath::{finite_difference_grad, relative_error, Params, Tape, Tensor, Var};
use fedmi::seeding::{derive_seed, stream_rng};
use fedmi::{Real, Result};

fn io_err(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> fedmi::Error {
    fedmi::Error::Io {
        path: path.into(),
        source,
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Analytic gradient of `f` over `inputs` against central differences.
fn tape_gradient_error(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let params = Params::new(inputs.to_vec());
    let eval = |p: &Params<f64>, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(out)?;
        Ok((value, vars.iter().flat_map(|&v| g.wrt(v).into_data()).collect()))
    };
    let (_, analytic) = eval(&params, true)?;
    let fd = finite_difference_grad(|x: &[f64]| Ok(eval(&params.with_flat(x)?, false)?.0), &params.to_flat(), 1e-6)?;
    Ok(relative_error(&analytic, &fd))
}

/// Contracts `v` with a fixed random tensor so every output entry matters.
fn project(tape: &mut Tape<f64>, v: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.value(v).shape().to_vec();
    let r = tape.leaf(random_tensor(&shape, &mut rng));
    let m = tape.mul(v, r)?;
    tape.sum(m)
}

fn layer_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let dense = [random_tensor(&[4, 5], &mut rng), random_tensor(&[5, 3], &mut rng), random_tensor(&[3], &mut rng)];
    out.push((
        "dense".to_string(),
        tape_gradient_error(&dense, &|t, v| {
            let m = t.matmul(v[0], v[1])?;
            let y = t.add_bias(m, v[2])?;
            project(t, y, seed)
        })?,
    ));
    out.push((
        "relu".to_string(),
        tape_gradient_error(&[random_tensor(&[6, 4], &mut rng)], &|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        })?,
    ));
    let conv = [random_tensor(&[2, 2, 5, 5], &mut rng), random_tensor(&[3, 2, 3, 3], &mut rng), random_tensor(&[3], &mut rng)];
    out.push((
        "conv2d".to_string(),
        tape_gradient_error(&conv, &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y, seed)
        })?,
    ));
    out.push((
        "max_pool2d".to_string(),
        tape_gradient_error(&[random_tensor(&[2, 3, 6, 6], &mut rng)], &|t, v| {
            let y = t.max_pool2d(v[0], 2, 2)?;
            project(t, y, seed)
        })?,
    ));
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    out.push((
        "embedding".to_string(),
        tape_gradient_error(&[random_tensor(&[4, 3], &mut rng)], &|t, v| {
            let y = t.gather_rows(v[0], &labels)?;
            project(t, y, seed)
        })?,
    ));
    Ok(out)
}

fn small_conv() -> ClassifierConfig {
    ClassifierConfig {
        channels: 2,
        height: 8,
        width: 8,
        conv: Some(ConvStack {
            conv1_out: 3,
            conv1_kernel: 3,
            pool_kernel: 2,
            pool_stride: 2,
            conv2_out: 2,
            conv2_kernel: 2,
        }),
        hidden: [5, 4],
        classes: 3,
    }
}

/// Gradient error of the full model (classifier plus critic) under `kind`.
fn model_loss_error(classifier: ClassifierConfig, kind: LossKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let spec = ModelSpec::new(classifier, 3);
    let params = spec.init::<f64>(seed)?;
    let batch = 5;
    let mut shape = vec![batch];
    shape.extend(classifier.sample_shape());
    let scale = if classifier.conv.is_some() { 1.0 } else { 2.0 };
    let x = Tensor::from_fn(&shape, |_| scale * rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|i| (i + seed as usize) % classifier.classes).collect();
    let cfg = MiLossConfig {
        tau: 1.0,
        alpha: 0.2,
        ..MiLossConfig::new(kind)
    };
    let objective = |p: &Params<f64>, grad: bool, surrogate: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = spec.bind(&mut tape, p);
        let xv = tape.leaf(x.clone());
        let out = spec.forward(&mut tape, &vars, xv)?;
        let loss = if kind == LossKind::CrossEntropy {
            tape.softmax_cross_entropy(out.logits, &labels)?
        } else {
            let s = spec.pair_scores(&mut tape, &vars, &out, &labels)?;
            if surrogate {
                // The NWJ-JS gradient follows the JS bound under NWJ anchoring.
                let js = bound_on_tape(&mut tape, &MiLossConfig::new(LossKind::Js), s)?;
                let z = log_partition_on_tape(&mut tape, &cfg, s)?;
                let neg = tape.neg(js)?;
                let c = tape.add_scalar(z, -cfg.alpha)?;
                let sq = tape.square(c)?;
                let pen = tape.scale(sq, cfg.beta)?;
                tape.add(neg, pen)?
            } else {
                regularized_loss_on_tape(&mut tape, &cfg, s)?
            }
        };
        let value = tape.value(loss).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().flat_map(|&v| g.wrt(v).into_data()).collect()))
    };
    let (_, analytic) = objective(&params, true, false)?;
    let surrogate = kind == LossKind::NwjJs;
    let fd = finite_difference_grad(
        |f: &[f64]| Ok(objective(&params.with_flat(f)?, false, surrogate)?.0),
        &params.to_flat(),
        1e-6,
    )?;
    Ok(relative_error(&analytic, &fd))
}

fn gradient_correctness() -> Result<Outcome> {
    let mut worst = (String::new(), 0.0f64);
    let mut note = |name: String, err: f64| {
        if !(err <= worst.1) {
            worst = (name, err);
        }
    };
    for seed in 0..20u64 {
        for (name, err) in layer_errors(seed)? {
            note(format!("{name} seed {seed}"), err);
        }
        for kind in LossKind::ALL {
            let mlp = ClassifierConfig::mlp(4, [6, 5], 3);
            note(format!("mlp+{kind} seed {seed}"), model_loss_error(mlp, kind, seed)?);
        }
        for kind in [LossKind::CrossEntropy, LossKind::InfoNce, LossKind::NwjJs] {
            note(format!("conv+{kind} seed {seed}"), model_loss_error(small_conv(), kind, seed)?);
        }
    }
    Ok(outcome(worst.1 < 1e-3, format!("worst relative error {:.2e} ({})", worst.1, worst.0)))
}

fn mi_calibration() -> Result<Outcome> {
    let targets = [(0.5, 0.1438, 0.05), (0.9, 0.8304, 0.15)];
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [LossKind::InfoNce, LossKind::Smile, LossKind::Mine] {
        for &(rho, truth, tol) in &targets {
            let r = calibrate_mi(&CalibrationConfig::new(kind, rho, 7))?;
            let ok = (r.estimate - truth).abs() <= tol;
            pass &= ok;
            parts.push(format!("{kind}@{rho}={:.4}", r.estimate));
            if kind == LossKind::InfoNce {
                let ceiling = 64f64.ln();
                if r.max_value() > ceiling {
                    pass = false;
                    parts.push(format!("infonce max {:.4} > ln 64", r.max_value()));
                }
            }
        }
    }
    Ok(outcome(pass, parts.join(" ")))
}

fn jfi_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..1000 {
        let n = rng.random_range(1..=30);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let j = jfi(&v)?;
        let nf = n as f64;
        if !(j >= 1.0 / nf - 1e-12 && j <= 1.0 + 1e-12) {
            return Ok(outcome(false, format!("vector {i}: J = {j} outside [1/{n}, 1]")));
        }
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        if (jfi(&scaled)? - j).abs() > 1e-9 {
            return Ok(outcome(false, format!("vector {i}: not scale invariant")));
        }
        let level = rng.random_range(0.1..5.0);
        if (jfi(&vec![level; n])? - 1.0).abs() > 1e-12 {
            return Ok(outcome(false, format!("vector {i}: all-equal is not 1")));
        }
        let mut one_hot = vec![0.0; n];
        one_hot[rng.random_range(0..n)] = level;
        if (jfi(&one_hot)? - 1.0 / nf).abs() > 1e-12 {
            return Ok(outcome(false, format!("vector {i}: one-hot is not 1/{n}")));
        }
    }
    Ok(outcome(true, "1000 vectors"))
}

fn shapley_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    for g in 0..200 {
        let n = rng.random_range(1..=6usize);
        let mut table: Vec<f64> = (0..1usize << n).map(|m| if m == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let dummy = rng.random_range(0..n);
        for m in 0..table.len() {
            if m & (1 << dummy) != 0 {
                table[m] = table[m & !(1 << dummy)];
            }
        }
        // Make players a and b interchangeable.
        let (a, b) = if n >= 3 { ((dummy + 1) % n, (dummy + 2) % n) } else { (dummy, dummy) };
        for m in 0..table.len() {
            let (ha, hb) = (m & (1 << a) != 0, m & (1 << b) != 0);
            if ha && !hb {
                let swapped = (m & !(1 << a)) | (1 << b);
                table[swapped] = table[m];
            }
        }
        let value = |c: &[usize]| -> Result<f64> { Ok(table[c.iter().fold(0, |m, &i| m | (1 << i))]) };
        let s = shapley_contributions(n, value, ShapleyMode::Exact, 0)?;
        let total = table[(1 << n) - 1] - table[0];
        if (s.iter().sum::<f64>() - total).abs() > 1e-9 {
            return Ok(outcome(false, format!("game {g}: efficiency violated")));
        }
        if s[dummy].abs() > 1e-9 {
            return Ok(outcome(false, format!("game {g}: dummy player got {}", s[dummy])));
        }
        if a != b && a != dummy && b != dummy && (s[a] - s[b]).abs() > 1e-9 {
            return Ok(outcome(false, format!("game {g}: symmetric players differ")));
        }
    }
    // Coalition values on the accuracy scale [0, 1], as the federated value
    // function produces; the wider [-1, 1] games are reported alongside.
    let mc_deviation = |lo: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut worst = 0.0f64;
        for g in 0..20u64 {
            let table: Vec<f64> = (0..16).map(|_| rng.random_range(lo..1.0)).collect();
            let value = |c: &[usize]| -> Result<f64> { Ok(table[c.iter().fold(0, |m, &i| m | (1 << i))]) };
            let exact = shapley_contributions(4, value, ShapleyMode::Exact, 0)?;
            let mc = shapley_contributions(4, value, ShapleyMode::MonteCarlo { permutations: 2000 }, g)?;
            for (e, m) in exact.iter().zip(&mc) {
                worst = worst.max((e - m).abs());
            }
        }
        Ok(worst)
    };
    let worst = mc_deviation(0.0, &mut rng)?;
    let wide = mc_deviation(-1.0, &mut rng)?;
    Ok(outcome(
        worst < 0.02,
        format!("200 exact games; MC max deviation {worst:.4} over 20 games ({wide:.4} on [-1, 1] games)"),
    ))
}

fn update(values: Vec<f32>, n: usize, loss: f64) -> ClientUpdate {
    let len = values.len();
    ClientUpdate {
        client: 0,
        params: Params::new(vec![Tensor::new(vec![len], values).expect("vector shape")]),
        n_samples: n,
        start_loss: loss,
    }
}

fn strategy_reductions() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_q = 0.0f64;
    let mut worst_avg = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(1..=6);
        let d = rng.random_range(1..=8);
        let models: Vec<Vec<f32>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let global = update((0..d).map(|_| rng.random_range(-3.0..3.0)).collect(), 1, 0.0).params;
        let equal: Vec<ClientUpdate> = models.iter().map(|m| update(m.clone(), 7, rng.random_range(0.01..5.0))).collect();
        let q0 = aggregate_qfedavg(&global, &equal, 0.0, rng.random_range(1.0..500.0))?;
        for (j, &got) in q0.iter().enumerate() {
            let mean = models.iter().map(|m| m[j] as f64).sum::<f64>() / k as f64;
            worst_q = worst_q.max((got as f64 - mean).abs());
        }

        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..50)).collect();
        let weighted: Vec<ClientUpdate> = models.iter().zip(&counts).map(|(m, &n)| update(m.clone(), n, 1.0)).collect();
        let avg = aggregate_fedavg(&weighted)?;
        let total: usize = counts.iter().sum();
        for (j, &got) in avg.iter().enumerate() {
            let oracle: f64 = models.iter().zip(&counts).map(|(m, &n)| m[j] as f64 * n as f64).sum::<f64>() / total as f64;
            worst_avg = worst_avg.max((got as f64 - oracle).abs() / oracle.abs().max(1.0));
        }
    }

    let cfg = RunConfig::load(
        None,
        &[
            "strategy=ditto",
            "lambda=0.0",
            "personal_epochs=2",
            "rounds=3",
            "epochs=1",
            "clients=4",
            "blob_classes=4",
            "blob_dims=4",
            "blob_per_class=30",
            "lr=0.01",
            "seed=13",
        ]
        .map(String::from),
    )?;
    let data = cfg.federated_data()?;
    let spec = cfg.model_spec(&data.dataset);
    let sim_cfg = cfg.simulation_config();
    let mut sim = Simulation::new(&spec, &data, sim_cfg.clone())?;
    for _ in 0..cfg.rounds {
        sim.step()?;
    }
    let personal_cfg = fedmi::engine::TrainConfig {
        epochs: 2,
        ..sim_cfg.train
    };
    let init: Params<Real> = spec.init(derive_seed(cfg.seed, &[TAG_INIT]))?;
    let mut ditto_exact = true;
    for client in sim.clients() {
        let mut v = init.clone();
        for k in 0..cfg.rounds {
            let mut rng = stream_rng(cfg.seed, &[TAG_PERSONAL, client.id as u64, k as u64]);
            v = local_train(&spec, &data.dataset, client.id, &client.train, &v, &personal_cfg, None, &mut rng)?.params;
        }
        ditto_exact &= client.personal.as_ref() == Some(&v);
    }

    let pass = worst_q < 1e-6 && worst_avg < 1e-6 && ditto_exact;
    Ok(outcome(
        pass,
        format!(
            "q-FedAvg(q=0) max dev {worst_q:.2e}; FedAvg rel dev {worst_avg:.2e}; Ditto(lambda=0) bit-exact {ditto_exact}"
        ),
    ))
}

fn determinism_overrides() -> Vec<String> {
    ["scenario=cross-silo", "clients=10", "rounds=5", "epochs=2", "loss=ce", "dataset=blobs", "lr=0.01", "seed=2024"]
        .map(String::from)
        .to_vec()
}

fn determinism_and_sanity() -> Result<(Outcome, Outcome)> {
    let root = tempfile::tempdir().map_err(|e| io_err(std::env::temp_dir(), e))?;
    let mut outputs = Vec::new();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(10);
    for (name, extra) in [("a", None), ("b", None), ("par", Some(threads))] {
        let mut o = determinism_overrides();
        o.push(format!("name={name}"));
        if let Some(t) = extra {
            o.push(format!("threads={t}"));
        }
        let cfg = RunConfig::load(None, &o)?;
        let bundle = run_experiment(&cfg, root.path())?;
        let dir = root.path().join(name);
        let read = |f: &str| fs::read(dir.join(f)).map_err(|e| io_err(dir.join(f), e));
        outputs.push((read(ROUNDS)?, read(FAIRNESS)?, bundle));
    }
    let identical = outputs.windows(2).all(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1);
    let determinism = outcome(identical, format!("3 executions (one with {threads} threads), {} bytes of rounds.csv", outputs[0].0.len()));

    let csv_text = String::from_utf8_lossy(&outputs[0].1).into_owned();
    let mut rows = 0;
    let mut problem = None;
    for line in csv_text.lines().skip(1) {
        rows += 1;
        let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        if vals.len() != 5 || vals.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            problem = Some(format!("row {line} has a component outside (0, 1]"));
            break;
        }
        if (vals[0] + vals[1] + vals[2] + vals[3]) / 4.0 != vals[4] {
            problem = Some(format!("row {line}: F_t is not the component mean"));
            break;
        }
    }
    let sanity = match problem {
        Some(p) => outcome(false, p),
        None => outcome(rows == 5, format!("{rows} rounds, all components in (0, 1], F_t exact")),
    };
    Ok((determinism, sanity))
}

fn desk_overrides(loss: LossKind, distribution: &str, seed: u64) -> Vec<String> {
    let mut o: Vec<String> = [
        "scenario=cross-silo",
        "clients=10",
        "rounds=10",
        "strategy=fedavg",
        "dataset=blobs",
        "lr=0.01",
    ]
    .map(String::from)
    .to_vec();
    o.push(format!("loss={}", loss.name()));
    o.push(format!("distribution={distribution}"));
    if distribution == "label-skew" {
        o.push("concentration=0.3".into());
    }
    o.push(format!("seed={seed}"));
    o.push(format!("name={}-{distribution}-{seed}", loss.name()));
    o
}

fn mean_ft(loss: LossKind, distribution: &str, root: &std::path::Path) -> Result<f64> {
    let mut total = 0.0;
    for seed in 1..=3 {
        let cfg = RunConfig::load(None, &desk_overrides(loss, distribution, seed))?;
        let bundle = run_experiment(&cfg, root)?;
        total += bundle.report.mean_general_fairness().unwrap_or(f64::NAN);
    }
    Ok(total / 3.0)
}

fn directional() -> Result<(Outcome, Outcome)> {
    let root = tempfile::tempdir().map_err(|e| io_err(std::env::temp_dir(), e))?;
    let ce_skew = mean_ft(LossKind::CrossEntropy, "label-skew", root.path())?;
    let mut best = (LossKind::Mine, f64::NEG_INFINITY);
    for kind in LossKind::MI {
        let ft = mean_ft(kind, "label-skew", root.path())?;
        if ft > best.1 {
            best = (kind, ft);
        }
    }
    let claim = outcome(
        best.1 >= ce_skew - 0.02,
        format!("best MI {} F_t {:.4} vs CE {:.4} (margin 0.02)", best.0, best.1, ce_skew),
    );
    let ce_iid = mean_ft(LossKind::CrossEntropy, "iid", root.path())?;
    let ordering = outcome(ce_iid >= ce_skew, format!("CE F_t IID {ce_iid:.4} vs label-skew {ce_skew:.4}"));
    Ok((claim, ordering))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failures = 0;
    let mut report = |name: &str, started: Instant, result: Result<Outcome>| {
        let secs = started.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!("{} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    };

    let t = Instant::now();
    report("gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    report("MI calibration", t, mi_calibration());
    let t = Instant::now();
    report("JFI oracle", t, jfi_oracle());
    let t = Instant::now();
    report("Shapley oracle", t, shapley_oracle());
    let t = Instant::now();
    report("strategy reductions", t, strategy_reductions());
    let t = Instant::now();
    match determinism_and_sanity() {
        Ok((d, s)) => {
            report("end-to-end determinism", t, Ok(d));
            report("fairness pipeline sanity", t, Ok(s));
        }
        Err(e) => {
            let msg = e.to_string();
            report("end-to-end determinism", t, Err(e));
            report("fairness pipeline sanity", t, Ok(outcome(false, format!("run failed: {msg}"))));
        }
    }
    let t = Instant::now();
    match directional() {
        Ok((c, o)) => {
            report("MI vs CE fairness under label skew", t, Ok(c));
            report("IID vs label-skew ordering", t, Ok(o));
        }
        Err(e) => {
            let msg = e.to_string();
            report("MI vs CE fairness under label skew", t, Err(e));
            report("IID vs label-skew ordering", t, Ok(outcome(false, format!("run failed: {msg}"))));
        }
    }
    println!("{} criteria failed", failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
