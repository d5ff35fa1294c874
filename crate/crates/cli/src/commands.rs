//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use setnet::dataset::{SetDataset, Split};
use setnet::mlp::{Architecture, MlpModel};
use setnet::oracle::{default_let_values, default_vd_values, OracleParams, SurrogateGrid};
use setnet::spicelet::{
    charge_balance, detect_plateau, let_sweep, perturbation_depth, transient, write_sweep_traces, Netlist,
    SetWaveform, StrikeConfig, VdBinding,
};
use setnet::trainer::{
    architecture_sweep, format_sweep_table, sorted_by_test_mse, train_lm, write_sweep_csv, TrainConfig,
};
use setnet::vacodegen::{export_verilog_a, golden_check};

use crate::{
    CircuitArgs, CliError, Command, ExportArgs, GenerateArgs, GridArgs, LmArgs, OracleArgs, OutDir, PipelineArgs,
    SimulateArgs, SweepArgs, TrainArgs,
};

/// Largest accepted difference between the exported module and the model, A.
pub const EXPORT_TOLERANCE: f64 = 1e-9;
/// Minimum plateau length reported by `simulate`, s.
pub const PLATEAU_MIN: f64 = 20e-12;

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate(a) => generate(&a).map(drop),
        Command::Train(a) => train(&a).map(drop),
        Command::Sweep(a) => sweep(&a),
        Command::Export(a) => export(&a).map(drop),
        Command::Simulate(a) => simulate(&a),
        Command::Pipeline(a) => pipeline(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

impl OutDir {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn ensure(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl OracleArgs {
    fn params(&self) -> OracleParams {
        OracleParams {
            tau_rise: self.tau_rise,
            tau_fall: self.tau_fall,
            t0: 0.0,
            charge_per_let: self.charge_per_let,
            depth: self.depth,
            eta0: self.eta0,
            eta1: self.eta1,
            vdd_ref: self.vdd_ref,
        }
    }
}

impl From<OracleParams> for OracleArgs {
    fn from(p: OracleParams) -> Self {
        Self {
            tau_rise: p.tau_rise,
            tau_fall: p.tau_fall,
            charge_per_let: p.charge_per_let,
            depth: p.depth,
            eta0: p.eta0,
            eta1: p.eta1,
            vdd_ref: p.vdd_ref,
        }
    }
}

impl GridArgs {
    fn grid(&self) -> SurrogateGrid {
        SurrogateGrid {
            let_values: if self.lets.is_empty() { default_let_values() } else { self.lets.clone() },
            vd_values: if self.vds.is_empty() { default_vd_values() } else { self.vds.clone() },
            base_step: self.base_step,
            t_stop: self.t_stop,
            max_rel_err: self.max_rel_err,
        }
    }
}

impl LmArgs {
    fn config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            max_epochs: self.epochs,
            mu_init: self.mu_init,
            mu_factor: self.mu_factor,
            mu_max: self.mu_max,
            grad_tol: self.grad_tol,
            val_patience: self.val_patience,
            init_seed: self.init_seed,
            lm_batch: (self.lm_batch > 0).then_some(self.lm_batch),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes the dataset and its manifest. The manifest is a config file that
/// reproduces the run with `generate --config`.
fn generate(a: &GenerateArgs) -> Result<PathBuf, CliError> {
    let p = a.oracle.params();
    p.validate()?;
    let grid = a.grid.grid();
    if !(grid.max_rel_err > 0.0 && grid.base_step > 0.0 && grid.t_stop > 0.0) {
        return Err(CliError::Usage("max-rel-err, base-step and t-stop must be positive".into()));
    }
    a.out.ensure()?;
    let path = a.out.resolve(&a.dataset);
    let ds = grid.dataset(&p, a.grid.seed)?;
    let mut w = create(&path)?;
    ds.write_csv(&mut w)?;
    w.flush().map_err(io_err(&path))?;

    let manifest = path.with_extension("manifest");
    let mut m = create(&manifest)?;
    let body = format!(
        "# setnet dataset manifest\n\
         dataset={}\nlets={}\nvds={}\nmax-rel-err={:e}\nbase-step={:e}\nt-stop={:e}\nseed={}\n\
         tau-rise={:e}\ntau-fall={:e}\ncharge-per-let={}\ndepth={}\neta0={}\neta1={}\nvdd-ref={}\n\
         # rows={} train={} val={} test={}\n",
        a.dataset.display(),
        join_f64(&grid.let_values),
        join_f64(&grid.vd_values),
        grid.max_rel_err,
        grid.base_step,
        grid.t_stop,
        a.grid.seed,
        p.tau_rise,
        p.tau_fall,
        p.charge_per_let,
        p.depth,
        p.eta0,
        p.eta1,
        p.vdd_ref,
        ds.len(),
        ds.count(Split::Train),
        ds.count(Split::Validation),
        ds.count(Split::Test),
    );
    m.write_all(body.as_bytes()).and_then(|_| m.flush()).map_err(io_err(&manifest))?;
    println!(
        "wrote {} rows (train {}, val {}, test {}) to {}",
        ds.len(),
        ds.count(Split::Train),
        ds.count(Split::Validation),
        ds.count(Split::Test),
        path.display()
    );
    println!("manifest: {}", manifest.display());
    Ok(path)
}

fn load_dataset(path: &Path) -> Result<SetDataset, CliError> {
    Ok(SetDataset::read_csv(open(path)?, None)?)
}

fn load_model(path: &Path) -> Result<MlpModel, CliError> {
    Ok(MlpModel::deserialize(open(path)?)?)
}

fn train(a: &TrainArgs) -> Result<PathBuf, CliError> {
    let arch = Architecture::parse(&a.arch, a.transfer)?;
    let cfg = a.lm.config()?;
    let data_path = a.out.resolve(&a.dataset);
    require_file(&data_path)?;
    a.out.ensure()?;
    let ds = load_dataset(&data_path)?;
    let (model, report) = train_lm(&arch, &ds, &cfg)?;

    let model_path = a.out.resolve(&a.model);
    let mut w = create(&model_path)?;
    model.serialize(&mut w)?;
    w.flush().map_err(io_err(&model_path))?;

    let report_path = a.out.resolve(&a.report);
    let mut w = create(&report_path)?;
    report.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&report_path))?;

    let summary_path = report_path.with_extension("summary.csv");
    let mut w = create(&summary_path)?;
    let summary = format!(
        "key,value\narch,{}\ntransfer,{}\nepochs,{}\nbest_epoch,{}\nstop_reason,{}\nlm_rows,{}\n\
         train_mse,{:e}\nval_mse,{:e}\ntest_mse,{:e}\ntest_rmse_amps,{:e}\n",
        arch.label(),
        arch.hidden_transfer,
        report.epochs_run(),
        report.best_epoch,
        report.stop_reason,
        report.lm_rows,
        report.train_mse,
        report.val_mse,
        report.test_mse,
        report.test_rmse_amps
    );
    w.write_all(summary.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&summary_path))?;

    println!(
        "{arch}: {} epochs (best {}, stop {}), mse train {:.3e} val {:.3e} test {:.3e}, test rmse {:.3e} A",
        report.epochs_run(),
        report.best_epoch,
        report.stop_reason,
        report.train_mse,
        report.val_mse,
        report.test_mse,
        report.test_rmse_amps
    );
    println!("model: {}", model_path.display());
    Ok(model_path)
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let cfg = a.lm.config()?;
    let archs = if a.archs.is_empty() { Architecture::table_grid() } else { a.archs.clone() };
    let data_path = a.out.resolve(&a.dataset);
    require_file(&data_path)?;
    a.out.ensure()?;
    let ds = load_dataset(&data_path)?;
    let result = architecture_sweep(&ds, &archs, &cfg)?;
    let rows = if a.sort { sorted_by_test_mse(&result.rows) } else { result.rows.clone() };
    let table_path = a.out.resolve(&a.table);
    let mut w = create(&table_path)?;
    write_sweep_csv(&mut w, &rows).and_then(|_| w.flush()).map_err(io_err(&table_path))?;
    if a.save_models {
        for (arch, model) in archs.iter().zip(&result.models) {
            let path = a.out.resolve(Path::new(&format!("model_{}_{}.txt", arch.label(), arch.hidden_transfer)));
            let mut w = create(&path)?;
            model.serialize(&mut w)?;
            w.flush().map_err(io_err(&path))?;
        }
    }
    print!("{}", format_sweep_table(&rows));
    println!("table: {}", table_path.display());
    Ok(())
}

fn export(a: &ExportArgs) -> Result<PathBuf, CliError> {
    let model_path = a.out.resolve(&a.model);
    require_file(&model_path)?;
    a.out.ensure()?;
    let model = load_model(&model_path)?;
    let va = export_verilog_a(&model, &a.module_name, a.t_strike)?;
    let path = a.out.resolve(&a.va);
    let mut w = create(&path)?;
    w.write_all(va.source_text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;
    println!("wrote module `{}` ({} network literals) to {}", va.module_name, va.network_literal_count(), path.display());
    if a.check_points > 0 {
        let worst = golden_check(&model, &va, a.check_points, a.check_seed)?;
        if !(worst < EXPORT_TOLERANCE) {
            return Err(CliError::Check(format!(
                "exported module differs from the model by {worst:e} A (limit {EXPORT_TOLERANCE:e} A)"
            )));
        }
        println!("check: {} points, max |va - model| = {worst:.3e} A", a.check_points);
    }
    Ok(path)
}

fn parse_binding(s: &str) -> Result<VdBinding, CliError> {
    match s {
        "instant" | "instantaneous" => Ok(VdBinding::Instantaneous),
        "prestrike" => Ok(VdBinding::PreStrike),
        v => v
            .parse()
            .map(VdBinding::Fixed)
            .map_err(|_| CliError::Usage(format!("binding must be instant, prestrike or a voltage, got `{v}`"))),
    }
}

impl CircuitArgs {
    fn config(&self) -> Result<StrikeConfig, CliError> {
        Ok(StrikeConfig {
            vdd: self.vdd,
            fanout: self.fanout,
            load_cap: self.load_cap,
            t_strike: self.t_strike,
            t_stop: self.sim_stop,
            dt: self.dt,
            binding: parse_binding(&self.binding)?,
        })
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let traces_dir = a.out.resolve(&a.traces);
    if let Some(netlist) = &a.netlist {
        let path = a.out.resolve(netlist);
        require_file(&path)?;
        let net = Netlist::from_file(&path)?;
        a.out.ensure()?;
        let trace = transient(&net, a.circuit.sim_stop, a.circuit.dt)?;
        let stem = path.file_stem().map_or("netlist".into(), |s| s.to_string_lossy().into_owned());
        let out = traces_dir.join(format!("{stem}.csv"));
        let mut w = create(&out)?;
        trace.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&out))?;
        println!("{} timepoints written to {}", trace.times.len(), out.display());
        return Ok(());
    }
    let cfg = a.circuit.config()?;
    let waveform = if a.oracle {
        SetWaveform::Oracle(OracleParams::default())
    } else {
        let path = a.out.resolve(&a.model);
        require_file(&path)?;
        let label = std::fs::canonicalize(&path).map_err(io_err(&path))?;
        SetWaveform::model(label.display().to_string(), load_model(&path)?)
    };
    a.out.ensure()?;
    let runs = let_sweep(&waveform, &a.circuit.lets, &cfg)?;
    let (nets, traces): (Vec<Netlist>, Vec<_>) = runs.into_iter().unzip();
    let files = write_sweep_traces(&traces_dir, &a.circuit.lets, &traces)?;
    for (l, net) in a.circuit.lets.iter().zip(&nets) {
        let path = traces_dir.join(format!("netlist_let{l}.cir"));
        let mut w = create(&path)?;
        w.write_all(net.to_text().as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;
    }

    let summary_path = a.out.resolve(Path::new("simulate_summary.csv"));
    let mut w = create(&summary_path)?;
    let mut text = String::from(
        "let,depth_v,min_out1_v,final_out1_v,crosses_half,plateau_start_s,plateau_end_s,injected_c,kcl_rel_err\n",
    );
    println!("{:>6} {:>9} {:>9} {:>9} {:>6} {:>22} {:>10}", "let", "depth", "min", "final", "half", "plateau (ps)", "kcl");
    for ((l, net), trace) in a.circuit.lets.iter().zip(&nets).zip(&traces) {
        let out1 = trace.node("out1").expect("chain has out1");
        let i = trace.set_current("ISET").expect("chain has ISET");
        let depth = perturbation_depth(&out1, cfg.vdd);
        let min = cfg.vdd - depth;
        let last = *out1.last().expect("non-empty trace");
        let crosses = min < 0.5 * cfg.vdd;
        let plateau = detect_plateau(&trace.times, &i, PLATEAU_MIN);
        let cb = charge_balance(net, trace, "ISET")?;
        let kcl = if cb.injected > 0.0 { cb.relative_error() } else { 0.0 };
        let (ps, pe) = plateau.map_or((String::new(), String::new()), |(s, e)| (s.to_string(), e.to_string()));
        text += &format!("{l},{depth},{min},{last},{crosses},{ps},{pe},{},{kcl}\n", cb.injected);
        let shown = plateau.map_or("-".into(), |(s, e)| format!("{:.1}..{:.1}", s * 1e12, e * 1e12));
        println!("{l:>6} {depth:>9.4} {min:>9.4} {last:>9.4} {crosses:>6} {shown:>22} {kcl:>10.2e}");
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&summary_path))?;
    println!("{} traces in {}", files.len(), traces_dir.display());
    Ok(())
}

fn pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    // Fail on bad circuit settings before the long steps.
    a.circuit.config()?;
    a.lm.config()?;
    let dataset = PathBuf::from("dataset.csv");
    let model = PathBuf::from("model.txt");
    generate(&GenerateArgs {
        out: a.out.clone(),
        dataset: dataset.clone(),
        grid: a.grid.clone(),
        oracle: OracleArgs::from(OracleParams::default()),
    })?;
    train(&TrainArgs {
        out: a.out.clone(),
        dataset,
        arch: a.arch.clone(),
        transfer: a.transfer,
        lm: a.lm.clone(),
        model: model.clone(),
        report: "train_report.csv".into(),
    })?;
    export(&ExportArgs {
        out: a.out.clone(),
        model: model.clone(),
        va: "set_source.va".into(),
        module_name: "set_source".into(),
        t_strike: a.circuit.t_strike,
        check_points: 1000,
        check_seed: 7,
    })?;
    simulate(&SimulateArgs {
        out: a.out.clone(),
        model,
        oracle: false,
        netlist: None,
        circuit: a.circuit.clone(),
        traces: "traces".into(),
    })
}
