//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Slow (the full architecture sweep dominates);
//! run with `cargo test -p setnet --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use setnet::metrics::fit_fidelity;
use setnet::mlp::{Architecture, Layer, MlpModel, Transfer};
use setnet::oracle::{collected_charge, generate_waveform, uniform_grid, OracleParams, SurrogateGrid};
use setnet::spicelet::{
    charge_balance, detect_plateau, let_sweep, perturbation_depth, trapezoid, SetWaveform, StrikeConfig,
    VdBinding,
};
use setnet::trainer::{
    architecture_sweep, init_params, lm_step, train_lm, train_samples, write_sweep_csv, Samples, SweepRow,
    TrainConfig,
};
use setnet::vacodegen::{export_verilog_a, golden_check};

use common::{fd_jacobian_row, random_model, row_rel_err, unit_norm};

const DATA_SEED: u64 = 42;
const LM_BATCH: usize = 4000;
const STRIKE_LETS: [f64; 5] = [5.0, 20.0, 40.0, 60.0, 80.0];
const PROBE_VDS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.2];

struct Outcome {
    failed: usize,
}

impl Outcome {
    fn report(&mut self, id: &str, what: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id} {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn lm_config() -> TrainConfig {
    TrainConfig { lm_batch: Some(LM_BATCH), ..Default::default() }
}

fn criterion_jacobian(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for (k, arch) in Architecture::table_grid().iter().enumerate() {
        let m = random_model(arch, 100 + k as u64);
        let xs: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let j = m.jacobian(&xs).expect("jacobian");
        for (r, x) in xs.iter().enumerate() {
            let row: Vec<f64> = j.row(r).iter().copied().collect();
            worst = worst.max(row_rel_err(&row, &fd_jacobian_row(&m, *x, 1e-6)));
        }
    }
    out.report("1", "jacobian vs central differences", worst < 1e-5, format!("max rel err {worst:.3e} (< 1e-5)"));
}

fn criterion_lm(out: &mut Outcome) {
    let layer = Layer::new(3, 1, vec![0.1, 0.2, 0.3], vec![0.0], Transfer::Purelin).unwrap();
    let m = MlpModel::new(vec![layer], unit_norm()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = Samples::default();
    for _ in 0..40 {
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let noise: f64 = rng.random_range(-0.1..0.1);
        s.inputs.push(x);
        s.targets.push(0.7 * x[0] - 1.3 * x[1] + 0.25 * x[2] + 0.4 + noise);
    }
    let resid = |m: &MlpModel| {
        DVector::from_iterator(s.len(), s.inputs.iter().zip(&s.targets).map(|(x, t)| t - m.forward(*x)))
    };
    let j = m.jacobian(&s.inputs).unwrap();
    let next = m.with_params(&lm_step(&m, &j, &resid(&m), 1e-12).unwrap()).unwrap();
    let ortho = j.tr_mul(&resid(&next)).amax();

    let sine = |n: usize, off: f64| {
        let mut s = Samples::default();
        for k in 0..n {
            let x = -1.0 + 2.0 * (k as f64 + off) / (n as f64 - 1.0 + 2.0 * off);
            s.inputs.push([x, 0.0, 0.0]);
            s.targets.push(x.sin());
        }
        s
    };
    let arch = Architecture::parse("8x1", Transfer::Tansig).unwrap();
    let init = MlpModel::from_params(&arch, &init_params(&arch, 1), unit_norm()).unwrap();
    let cfg = TrainConfig { max_epochs: 200, ..Default::default() };
    let (_, rep) = train_samples(init, &sine(101, 0.0), &sine(50, 0.5), &cfg).unwrap();
    let pass = ortho < 1e-8 && rep.train_mse < 1e-5 && rep.epochs_run() <= 200;
    out.report(
        "2",
        "LM sanity",
        pass,
        format!(
            "linear |J'e| {ortho:.2e} (< 1e-8); sin 8x1 tansig train mse {:.3e} (< 1e-5) after {} epochs (<= 200)",
            rep.train_mse,
            rep.epochs_run()
        ),
    );
}

fn find<'a>(rows: &'a [SweepRow], shape: &str, t: Transfer) -> &'a SweepRow {
    let arch = Architecture::parse(shape, t).unwrap();
    rows.iter().find(|r| r.arch == arch).expect("architecture in sweep")
}

fn criterion_ordering(out: &mut Outcome, rows: &[SweepRow]) {
    for r in rows {
        println!(
            "     {:<10} {:<9} test mse {:.4e}  epochs {}  {}",
            r.arch.label(),
            r.arch.hidden_transfer,
            r.test_mse,
            r.epochs,
            r.stop_reason.as_str()
        );
    }
    let deep = find(rows, "8x16x8x1", Transfer::Tansig).test_mse;
    let mid = find(rows, "8x8x1", Transfer::Tansig).test_mse;
    let wide = find(rows, "16x1", Transfer::Tansig).test_mse;
    let log = find(rows, "8x8x1", Transfer::Logsig).test_mse;
    let ell = find(rows, "8x8x1", Transfer::Elliotsig).test_mse;
    let checks = [
        ("8x16x8x1 < 8x8x1 (tansig)", deep < mid, deep, mid),
        ("8x8x1 < 16x1 (tansig)", mid < wide, mid, wide),
        ("tansig <= logsig (8x8x1)", mid <= log, mid, log),
        ("logsig < elliotsig (8x8x1)", log < ell, log, ell),
    ];
    for (what, ok, a, b) in checks {
        out.report("3", what, ok, format!("{a:.4e} vs {b:.4e}"));
    }
}

fn criterion_fidelity(out: &mut Outcome, m: &MlpModel, p: &OracleParams) {
    let grid = uniform_grid(0.0, 1e-9, 0.1e-12);
    let fid = fit_fidelity(m, p, &STRIKE_LETS, &PROBE_VDS, &grid).unwrap();
    let peak = fid.iter().map(|f| f.peak_rel_err()).fold(0.0, f64::max);
    let width = fid.iter().map(|f| f.fwhm_rel_err()).fold(0.0, f64::max);
    out.report("4", "peak fidelity (8x8x1 tansig)", peak < 0.05, format!("worst rel err {:.3}% (< 5%)", 100.0 * peak));
    out.report("4", "FWHM fidelity (8x8x1 tansig)", width < 0.05, format!("worst rel err {:.3}% (< 5%)", 100.0 * width));
}

fn criterion_codegen(out: &mut Outcome, m: &MlpModel) {
    let a = export_verilog_a(m, "set_source", 200e-12).unwrap();
    let b = export_verilog_a(m, "set_source", 200e-12).unwrap();
    let err = golden_check(m, &a, 1000, 7).unwrap();
    out.report("5", "Verilog-A golden check", err < 1e-9, format!("max |va - model| {err:.3e} A over 1000 points (< 1e-9)"));
    out.report(
        "5",
        "Verilog-A text stable",
        a.source_text == b.source_text,
        format!("{} bytes", a.source_text.len()),
    );
}

fn criterion_circuit(out: &mut Outcome, m: &MlpModel) -> Vec<String> {
    let cfg = StrikeConfig { binding: VdBinding::Instantaneous, ..Default::default() };
    let wf = SetWaveform::model("model", m.clone());
    let runs = let_sweep(&wf, &STRIKE_LETS, &cfg).unwrap();

    let mut pre = 0.0f64;
    let mut depths = Vec::new();
    let mut kcl = 0.0f64;
    for (net, tr) in &runs {
        let v = tr.node("out1").unwrap();
        for (t, x) in tr.times.iter().zip(&v) {
            if *t < cfg.t_strike {
                pre = pre.max((x - cfg.vdd).abs());
            }
        }
        depths.push(perturbation_depth(&v, cfg.vdd));
        kcl = kcl.max(charge_balance(net, tr, "ISET").unwrap().relative_error());
    }
    out.report("6a", "pre-strike out1 = vdd", pre < 1e-6, format!("max deviation {pre:.3e} V (< 1e-6)"));
    let mono = depths.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = depths.iter().map(|d| format!("{d:.4}")).collect();
    out.report("6b", "depth monotone in LET", mono, format!("depths [{}] V", shown.join(", ")));
    let (_, top) = runs.last().unwrap();
    let v = top.node("out1").unwrap();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let last = *v.last().unwrap();
    let half = 0.5 * cfg.vdd;
    out.report(
        "6c",
        "highest LET crosses vdd/2 and recovers",
        min < half && last > half,
        format!("min {min:.4} V, final {last:.4} V (vdd/2 = {half})"),
    );
    let i = top.set_current("ISET").unwrap();
    let plateau = detect_plateau(&top.times, &i, 20e-12);
    out.report(
        "6d",
        "plateau >= 20 ps in injected current",
        plateau.is_some(),
        match plateau {
            Some((a, b)) => format!("[{:.1}, {:.1}] ps", a * 1e12, b * 1e12),
            None => "no qualifying interval".into(),
        },
    );
    out.report("7", "struck-node KCL charge balance", kcl < 0.01, format!("worst rel err {kcl:.3e} (< 1e-2)"));
    runs.iter().map(|(_, t)| t.to_csv_string()).collect()
}

fn criterion_charge(out: &mut Outcome, p: &OracleParams, g: &SurrogateGrid) {
    // Window long enough that the truncated tail is below 1e-6 of Q.
    let grid = uniform_grid(p.t0, p.t0 + 15.0 * p.tau_fall, g.base_step);
    let mut worst = 0.0f64;
    for &l in &g.let_values {
        for &vd in &g.vd_values {
            let w = generate_waveform(l, vd, &grid, p).unwrap();
            let q = collected_charge(l, vd, p).unwrap();
            worst = worst.max((trapezoid(w.times(), w.currents()) - q).abs() / q);
        }
    }
    out.report("7", "oracle charge = closed-form Q", worst < 1e-3, format!("worst rel err {worst:.3e} (< 1e-3)"));
}

fn main() -> ExitCode {
    let mut out = Outcome { failed: 0 };
    let start = Instant::now();
    let p = OracleParams::default();
    let grid = SurrogateGrid::default();

    criterion_jacobian(&mut out);
    criterion_lm(&mut out);

    let data = grid.dataset(&p, DATA_SEED).unwrap();
    let mut csv_a = Vec::new();
    data.write_csv(&mut csv_a).unwrap();
    println!("     dataset: {} rows, {:.1}s", data.len(), start.elapsed().as_secs_f64());

    let t = Instant::now();
    let archs = Architecture::table_grid();
    let sweep = architecture_sweep(&data, &archs, &lm_config()).unwrap();
    println!("     sweep: {:.0}s", t.elapsed().as_secs_f64());
    criterion_ordering(&mut out, &sweep.rows);

    let idx = archs.iter().position(|a| *a == Architecture::parse("8x8x1", Transfer::Tansig).unwrap()).unwrap();
    let model = &sweep.models[idx];
    criterion_fidelity(&mut out, model, &p);
    criterion_codegen(&mut out, model);
    let traces_a = criterion_circuit(&mut out, model);
    criterion_charge(&mut out, &p, &grid);

    // Second runs for the determinism criterion.
    let data_b = grid.dataset(&p, DATA_SEED).unwrap();
    let mut csv_b = Vec::new();
    data_b.write_csv(&mut csv_b).unwrap();
    out.report("8", "dataset CSV bit-identical", csv_a == csv_b, format!("{} bytes", csv_a.len()));

    let (retrained, _) = train_lm(&archs[idx], &data_b, &lm_config()).unwrap();
    out.report(
        "8",
        "model file bit-identical",
        retrained.to_text() == model.to_text(),
        format!("{} bytes", model.to_text().len()),
    );

    let short = TrainConfig { max_epochs: 10, ..lm_config() };
    let table = |d| {
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &architecture_sweep(d, &archs, &short).unwrap().rows).unwrap();
        buf
    };
    let (ta, tb) = (table(&data), table(&data_b));
    out.report("8", "sweep table bit-identical", ta == tb, format!("{} rows, 10 epochs each", archs.len()));

    let cfg = StrikeConfig::default();
    let wf = SetWaveform::model("model", retrained);
    let traces_b: Vec<String> =
        let_sweep(&wf, &STRIKE_LETS, &cfg).unwrap().iter().map(|(_, t)| t.to_csv_string()).collect();
    out.report("8", "traces bit-identical", traces_a == traces_b, format!("{} traces", traces_a.len()));

    println!("     total {:.0}s, {} failed", start.elapsed().as_secs_f64(), out.failed);
    if out.failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
