//! A small transient circuit simulator: modified nodal analysis with level-1
//! MOSFETs, linear R/C elements, DC voltage sources and SET current sources.
//!
//! Capacitors use trapezoidal companion models. Every timestep is solved by
//! Newton iteration; a step that fails is halved, down to `dt / 64`.
//!
//! # Netlist text format
//!
//! One element per line. `*` starts a comment line and blank lines are
//! ignored. Node `0` (alias `gnd`) is ground. Numbers are plain floats in SI
//! units; engineering suffixes are not supported.
//!
//! ```text
//! V<name> <n+> <n-> dc=<V> [step=<V> t_step=<s>]
//! R<name> <a> <b> r=<ohm>
//! C<name> <a> <b> c=<F>
//! M<name> <drain> <gate> <source> nmos|pmos vth=<V> kp=<A/V^2> wl=<W/L> lambda=<1/V>
//! I<name> <drain> <source> set source=oracle|model:<path> let=<LET> t_strike=<s> vd=instant|prestrike|<V>
//!         [tau_rise= tau_fall= charge_per_let= depth= eta0= eta1= vdd_ref=]
//! ```
//!
//! A stepped source holds `dc` at the operating point and switches to `step`
//! for `t > t_step`. The SET source pushes current from `drain` to `source`
//! starting at `t_strike`; `let=0` disables it. Oracle parameters default to
//! [`OracleParams::default`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::mlp::{MlpError, MlpModel};
use crate::oracle::{OracleError, OracleParams};

pub const GMIN: f64 = 1e-12;
pub const RESIDUAL_TOL: f64 = 1e-9;
pub const STEP_TOL: f64 = 1e-6;
pub const MAX_NEWTON_ITERS: usize = 50;
/// Smallest step, as a divisor of the nominal `dt`.
pub const MIN_STEP_DIVISOR: f64 = 64.0;
/// Largest node-voltage change applied in one Newton update, V.
const MAX_NEWTON_DV: f64 = 0.5;
/// Finite-difference step for the SET source's bias sensitivity, V.
const VD_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SpiceError {
    #[error("device `{device}` references unknown node {node}")]
    UnknownNode { device: String, node: usize },
    #[error("duplicate device name `{0}`")]
    DuplicateDevice(String),
    #[error("netlist has no voltage source")]
    NoVoltageSource,
    #[error("device `{name}`: {message}")]
    InvalidDevice { name: String, message: String },
    #[error("device `{0}` not found")]
    TargetNotFound(String),
    #[error("`{name}` is not an OFF-state NMOS ({message})")]
    NotOffNmos { name: String, message: String },
    #[error("netlist line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid analysis parameters: {0}")]
    InvalidParams(String),
    #[error("DC operating point did not converge")]
    DcFailed,
    #[error("Newton iteration failed at t = {t:e} s with step {step:e} s")]
    NonConvergence { t: f64, step: f64 },
    #[error("unsupported analysis: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MosKind {
    Nmos,
    Pmos,
}

impl MosKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MosKind::Nmos => "nmos",
            MosKind::Pmos => "pmos",
        }
    }
}

/// Level-1 square-law parameters. `vth` carries its sign (negative for PMOS).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosParams {
    pub kind: MosKind,
    pub vth: f64,
    /// Process transconductance, A/V².
    pub kp: f64,
    pub w_over_l: f64,
    /// Channel-length modulation, 1/V.
    pub lambda: f64,
}

impl MosParams {
    pub fn nmos_default() -> Self {
        Self { kind: MosKind::Nmos, vth: 0.4, kp: 250e-6, w_over_l: 420.0 / 130.0, lambda: 0.05 }
    }

    pub fn pmos_default() -> Self {
        Self { kind: MosKind::Pmos, vth: -0.4, kp: 100e-6, w_over_l: 2.0 * 420.0 / 130.0, lambda: 0.05 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if ![self.vth, self.kp, self.w_over_l, self.lambda].iter().all(|v| v.is_finite()) {
            return Err("parameters must be finite".into());
        }
        if !(self.kp > 0.0 && self.w_over_l > 0.0 && self.lambda >= 0.0) {
            return Err("need kp > 0, wl > 0, lambda >= 0".into());
        }
        Ok(())
    }
}

/// Square-law current for a device with `vds >= 0` and positive threshold:
/// `(id, d id/d vgs, d id/d vds)`.
fn square_law(beta: f64, vth: f64, lambda: f64, vgs: f64, vds: f64) -> (f64, f64, f64) {
    let vov = vgs - vth;
    if vov <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let clm = 1.0 + lambda * vds;
    if vds < vov {
        let core = vov * vds - 0.5 * vds * vds;
        (beta * core * clm, beta * vds * clm, beta * ((vov - vds) * clm + core * lambda))
    } else {
        let core = 0.5 * vov * vov;
        (beta * core * clm, beta * vov * clm, beta * core * lambda)
    }
}

/// Drain current (positive into the drain) with partials against `vgs` and
/// `vds`. Reverse bias swaps the roles of drain and source.
pub fn mosfet_eval(p: &MosParams, vgs: f64, vds: f64) -> (f64, f64, f64) {
    let beta = p.kp * p.w_over_l;
    let (vgs, vds, vth, sign) = match p.kind {
        MosKind::Nmos => (vgs, vds, p.vth, 1.0),
        MosKind::Pmos => (-vgs, -vds, -p.vth, -1.0),
    };
    // In the mirrored frame: id = sign * f(vgs, vds), chain rule gives
    // d id/d vgs_orig = f_g and d id/d vds_orig = f_d for both kinds.
    let (id, gm, gds) = if vds >= 0.0 {
        square_law(beta, vth, p.lambda, vgs, vds)
    } else {
        // Source and drain exchange: f(vgs, vds) = -g(vgs - vds, -vds).
        let (i, g_g, g_d) = square_law(beta, vth, p.lambda, vgs - vds, -vds);
        (-i, -g_g, g_g + g_d)
    };
    (sign * id, gm, gds)
}

/// Drain current in amperes, positive into the drain terminal.
pub fn mosfet_current(p: &MosParams, vgs: f64, vds: f64) -> f64 {
    mosfet_eval(p, vgs, vds).0
}

/// Which drain bias the SET source feeds to its current model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VdBinding {
    /// Live drain-source voltage, re-sampled every Newton iteration.
    Instantaneous,
    /// Drain-source voltage of the DC operating point.
    PreStrike,
    Fixed(f64),
}

impl VdBinding {
    fn to_text(self) -> String {
        match self {
            VdBinding::Instantaneous => "instant".into(),
            VdBinding::PreStrike => "prestrike".into(),
            VdBinding::Fixed(v) => format!("{v}"),
        }
    }
}

/// Current model behind a SET source.
#[derive(Debug, Clone)]
pub enum SetWaveform {
    Oracle(OracleParams),
    /// A trained network. `label` is written back as `source=model:<label>`.
    Model { label: String, model: Arc<MlpModel> },
}

impl SetWaveform {
    pub fn model(label: impl Into<String>, model: MlpModel) -> Self {
        SetWaveform::Model { label: label.into(), model: Arc::new(model) }
    }

    /// Bias range over which the model is defined; inputs are clamped to it.
    pub fn vd_range(&self) -> (f64, f64) {
        match self {
            SetWaveform::Oracle(p) => (0.0, p.vdd_ref),
            SetWaveform::Model { model, .. } => (model.norm().vd.min, model.norm().vd.max),
        }
    }

    /// Current at `ts` seconds after the strike. Zero before the strike and
    /// for a non-positive LET.
    pub fn current(&self, ts: f64, let_value: f64, vd: f64) -> f64 {
        if ts < 0.0 || !(let_value > 0.0) {
            return 0.0;
        }
        let (lo, hi) = self.vd_range();
        let vd = vd.clamp(lo, hi);
        match self {
            SetWaveform::Oracle(p) => {
                let q = p.charge_per_let * let_value * p.depth * p.efficiency(vd) * 1e-15;
                q / (p.tau_fall - p.tau_rise) * ((-ts / p.tau_fall).exp() - (-ts / p.tau_rise).exp())
            }
            SetWaveform::Model { model, .. } => model.predict_current(ts, let_value, vd),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SetSource {
    pub name: String,
    pub drain: usize,
    pub source: usize,
    pub waveform: SetWaveform,
    pub let_value: f64,
    pub t_strike: f64,
    pub binding: VdBinding,
}

#[derive(Debug, Clone)]
pub enum Device {
    Mosfet { name: String, drain: usize, gate: usize, source: usize, params: MosParams },
    Capacitor { name: String, a: usize, b: usize, farads: f64 },
    Resistor { name: String, a: usize, b: usize, ohms: f64 },
    VoltageSource { name: String, pos: usize, neg: usize, dc: f64, step: Option<(f64, f64)> },
    Set(SetSource),
}

impl Device {
    pub fn name(&self) -> &str {
        match self {
            Device::Mosfet { name, .. }
            | Device::Capacitor { name, .. }
            | Device::Resistor { name, .. }
            | Device::VoltageSource { name, .. } => name,
            Device::Set(s) => &s.name,
        }
    }

    fn nodes(&self) -> Vec<usize> {
        match self {
            Device::Mosfet { drain, gate, source, .. } => vec![*drain, *gate, *source],
            Device::Capacitor { a, b, .. } | Device::Resistor { a, b, .. } => vec![*a, *b],
            Device::VoltageSource { pos, neg, .. } => vec![*pos, *neg],
            Device::Set(s) => vec![s.drain, s.source],
        }
    }
}

/// Circuit description. Node 0 is ground and is always present.
#[derive(Debug, Clone)]
pub struct Netlist {
    nodes: Vec<String>,
    devices: Vec<Device>,
}

impl Default for Netlist {
    fn default() -> Self {
        Self::new()
    }
}

impl Netlist {
    pub fn new() -> Self {
        Self { nodes: vec!["0".into()], devices: Vec::new() }
    }

    /// Index of `name`, added if new. `0` and `gnd` are ground.
    pub fn node(&mut self, name: &str) -> usize {
        if name == "0" || name.eq_ignore_ascii_case("gnd") {
            return 0;
        }
        if let Some(k) = self.nodes.iter().position(|n| n == name) {
            return k;
        }
        self.nodes.push(name.to_string());
        self.nodes.len() - 1
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        if name == "0" || name.eq_ignore_ascii_case("gnd") {
            return Some(0);
        }
        self.nodes.iter().position(|n| n == name)
    }

    pub fn node_names(&self) -> &[String] {
        &self.nodes
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name() == name)
    }

    pub fn add(&mut self, d: Device) -> &mut Self {
        self.devices.push(d);
        self
    }

    pub fn mosfet_count(&self) -> usize {
        self.devices.iter().filter(|d| matches!(d, Device::Mosfet { .. })).count()
    }

    /// Checks node references, names and element values.
    pub fn validate(&self) -> Result<(), SpiceError> {
        let mut seen = HashMap::new();
        let mut has_vsrc = false;
        for d in &self.devices {
            if seen.insert(d.name().to_string(), ()).is_some() {
                return Err(SpiceError::DuplicateDevice(d.name().into()));
            }
            for n in d.nodes() {
                if n >= self.nodes.len() {
                    return Err(SpiceError::UnknownNode { device: d.name().into(), node: n });
                }
            }
            let bad = |message: &str| SpiceError::InvalidDevice { name: d.name().into(), message: message.into() };
            match d {
                Device::Mosfet { params, .. } => params.validate().map_err(|m| bad(&m))?,
                Device::Capacitor { farads, .. } if !(*farads > 0.0 && farads.is_finite()) => {
                    return Err(bad("capacitance must be positive"))
                }
                Device::Resistor { ohms, .. } if !(*ohms > 0.0 && ohms.is_finite()) => {
                    return Err(bad("resistance must be positive"))
                }
                Device::VoltageSource { pos, neg, dc, step, .. } => {
                    has_vsrc = true;
                    if pos == neg {
                        return Err(bad("terminals are shorted"));
                    }
                    let finite = dc.is_finite() && step.is_none_or(|(v, t)| v.is_finite() && t.is_finite());
                    if !finite {
                        return Err(bad("values must be finite"));
                    }
                }
                Device::Set(s) => {
                    if !(s.let_value >= 0.0 && s.let_value.is_finite() && s.t_strike.is_finite()) {
                        return Err(bad("let must be >= 0 and t_strike finite"));
                    }
                    if let SetWaveform::Oracle(p) = &s.waveform {
                        p.validate()?;
                    }
                    if let VdBinding::Fixed(v) = s.binding {
                        if !v.is_finite() {
                            return Err(bad("fixed vd must be finite"));
                        }
                    }
                }
                _ => {}
            }
        }
        if !has_vsrc {
            return Err(SpiceError::NoVoltageSource);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let n = |k: usize| self.nodes[k].as_str();
        let mut s = String::new();
        for d in &self.devices {
            let _ = match d {
                Device::Mosfet { name, drain, gate, source, params } => writeln!(
                    s,
                    "{name} {} {} {} {} vth={} kp={} wl={} lambda={}",
                    n(*drain),
                    n(*gate),
                    n(*source),
                    params.kind.as_str(),
                    params.vth,
                    params.kp,
                    params.w_over_l,
                    params.lambda
                ),
                Device::Capacitor { name, a, b, farads } => writeln!(s, "{name} {} {} c={farads}", n(*a), n(*b)),
                Device::Resistor { name, a, b, ohms } => writeln!(s, "{name} {} {} r={ohms}", n(*a), n(*b)),
                Device::VoltageSource { name, pos, neg, dc, step } => {
                    let _ = write!(s, "{name} {} {} dc={dc}", n(*pos), n(*neg));
                    if let Some((v, t)) = step {
                        let _ = write!(s, " step={v} t_step={t}");
                    }
                    writeln!(s)
                }
                Device::Set(src) => {
                    let _ = write!(s, "{} {} {} set", src.name, n(src.drain), n(src.source));
                    match &src.waveform {
                        SetWaveform::Oracle(p) => {
                            let _ = write!(
                                s,
                                " source=oracle tau_rise={} tau_fall={} charge_per_let={} depth={} eta0={} eta1={} vdd_ref={}",
                                p.tau_rise, p.tau_fall, p.charge_per_let, p.depth, p.eta0, p.eta1, p.vdd_ref
                            );
                        }
                        SetWaveform::Model { label, .. } => {
                            let _ = write!(s, " source=model:{label}");
                        }
                    }
                    writeln!(s, " let={} t_strike={} vd={}", src.let_value, src.t_strike, src.binding.to_text())
                }
            };
        }
        s
    }

    /// Parses the text format. Relative model paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, SpiceError> {
        let mut net = Netlist::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('*') {
                continue;
            }
            let perr = |message: String| SpiceError::Parse { line, message };
            let toks: Vec<&str> = l.split_whitespace().collect();
            let name = toks[0].to_string();
            let mut positional = Vec::new();
            let mut kv = HashMap::new();
            for t in &toks[1..] {
                match t.split_once('=') {
                    Some((key, v)) => {
                        if kv.insert(key, v).is_some() {
                            return Err(perr(format!("duplicate key `{key}`")));
                        }
                    }
                    None if kv.is_empty() => positional.push(*t),
                    None => return Err(perr(format!("positional token `{t}` after key=value pairs"))),
                }
            }
            let num = |kv: &HashMap<&str, &str>, key: &str| -> Result<Option<f64>, SpiceError> {
                kv.get(key)
                    .map(|v| v.parse::<f64>().map_err(|_| perr(format!("`{key}={v}` is not a number"))))
                    .transpose()
            };
            let req = |kv: &HashMap<&str, &str>, key: &str| -> Result<f64, SpiceError> {
                num(kv, key)?.ok_or_else(|| perr(format!("missing `{key}=`")))
            };
            let want = |count: usize| -> Result<(), SpiceError> {
                if positional.len() == count {
                    Ok(())
                } else {
                    Err(perr(format!("expected {count} positional fields after the name, found {}", positional.len())))
                }
            };
            let allow = |keys: &[&str]| -> Result<(), SpiceError> {
                match kv.keys().find(|k| !keys.contains(k)) {
                    Some(k) => Err(perr(format!("unknown key `{k}`"))),
                    None => Ok(()),
                }
            };
            let kind = name.chars().next().map(|c| c.to_ascii_uppercase());
            let dev = match kind {
                Some('V') => {
                    want(2)?;
                    allow(&["dc", "step", "t_step"])?;
                    let step = match (num(&kv, "step")?, num(&kv, "t_step")?) {
                        (Some(v), Some(t)) => Some((v, t)),
                        (None, None) => None,
                        _ => return Err(perr("`step=` and `t_step=` go together".into())),
                    };
                    Device::VoltageSource {
                        name,
                        pos: net.node(positional[0]),
                        neg: net.node(positional[1]),
                        dc: req(&kv, "dc")?,
                        step,
                    }
                }
                Some('R') => {
                    want(2)?;
                    allow(&["r"])?;
                    Device::Resistor { name, a: net.node(positional[0]), b: net.node(positional[1]), ohms: req(&kv, "r")? }
                }
                Some('C') => {
                    want(2)?;
                    allow(&["c"])?;
                    Device::Capacitor { name, a: net.node(positional[0]), b: net.node(positional[1]), farads: req(&kv, "c")? }
                }
                Some('M') => {
                    want(4)?;
                    allow(&["vth", "kp", "wl", "lambda"])?;
                    let kind = match positional[3].to_ascii_lowercase().as_str() {
                        "nmos" => MosKind::Nmos,
                        "pmos" => MosKind::Pmos,
                        other => return Err(perr(format!("unknown device type `{other}`"))),
                    };
                    Device::Mosfet {
                        name,
                        drain: net.node(positional[0]),
                        gate: net.node(positional[1]),
                        source: net.node(positional[2]),
                        params: MosParams {
                            kind,
                            vth: req(&kv, "vth")?,
                            kp: req(&kv, "kp")?,
                            w_over_l: req(&kv, "wl")?,
                            lambda: req(&kv, "lambda")?,
                        },
                    }
                }
                Some('I') => {
                    want(3)?;
                    if positional[2] != "set" {
                        return Err(perr("only `set` current sources are supported".into()));
                    }
                    allow(&[
                        "source", "let", "t_strike", "vd", "tau_rise", "tau_fall", "charge_per_let", "depth", "eta0",
                        "eta1", "vdd_ref",
                    ])?;
                    let src = kv.get("source").ok_or_else(|| perr("missing `source=`".into()))?;
                    let waveform = if *src == "oracle" {
                        let d = OracleParams::default();
                        SetWaveform::Oracle(OracleParams {
                            tau_rise: num(&kv, "tau_rise")?.unwrap_or(d.tau_rise),
                            tau_fall: num(&kv, "tau_fall")?.unwrap_or(d.tau_fall),
                            t0: 0.0,
                            charge_per_let: num(&kv, "charge_per_let")?.unwrap_or(d.charge_per_let),
                            depth: num(&kv, "depth")?.unwrap_or(d.depth),
                            eta0: num(&kv, "eta0")?.unwrap_or(d.eta0),
                            eta1: num(&kv, "eta1")?.unwrap_or(d.eta1),
                            vdd_ref: num(&kv, "vdd_ref")?.unwrap_or(d.vdd_ref),
                        })
                    } else if let Some(path) = src.strip_prefix("model:") {
                        let full = base_dir.join(path);
                        let file = std::fs::File::open(&full)
                            .map_err(|e| perr(format!("cannot open model `{}`: {e}", full.display())))?;
                        let model = MlpModel::deserialize(std::io::BufReader::new(file))?;
                        SetWaveform::model(path, model)
                    } else {
                        return Err(perr(format!("unknown source `{src}`")));
                    };
                    let binding = match kv.get("vd").copied().unwrap_or("instant") {
                        "instant" => VdBinding::Instantaneous,
                        "prestrike" => VdBinding::PreStrike,
                        v => VdBinding::Fixed(v.parse().map_err(|_| perr(format!("bad vd binding `{v}`")))?),
                    };
                    Device::Set(SetSource {
                        name,
                        drain: net.node(positional[0]),
                        source: net.node(positional[1]),
                        waveform,
                        let_value: req(&kv, "let")?,
                        t_strike: req(&kv, "t_strike")?,
                        binding,
                    })
                }
                _ => return Err(perr(format!("unknown element `{name}`"))),
            };
            net.devices.push(dev);
        }
        net.validate()?;
        Ok(net)
    }

    pub fn from_file(path: &Path) -> Result<Self, SpiceError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Stage-1 inverter with its input tied low, driving `fanout` inverters.
/// Nodes: `vdd`, `in`, `out1`, `out2_1..`. Devices: `MN1`/`MP1` for stage 1,
/// `MN2_k`/`MP2_k` for the loads, one `load_cap` capacitor per output.
pub fn build_inverter_chain(vdd: f64, fanout: usize, load_cap: f64) -> Result<Netlist, SpiceError> {
    if fanout == 0 {
        return Err(SpiceError::InvalidParams("fanout must be at least 1".into()));
    }
    let mut n = Netlist::new();
    let (vdd_n, inp, out1) = (n.node("vdd"), n.node("in"), n.node("out1"));
    let (nmos, pmos) = (MosParams::nmos_default(), MosParams::pmos_default());
    n.add(Device::VoltageSource { name: "VDD".into(), pos: vdd_n, neg: 0, dc: vdd, step: None });
    n.add(Device::VoltageSource { name: "VIN".into(), pos: inp, neg: 0, dc: 0.0, step: None });
    n.add(Device::Mosfet { name: "MN1".into(), drain: out1, gate: inp, source: 0, params: nmos });
    n.add(Device::Mosfet { name: "MP1".into(), drain: out1, gate: inp, source: vdd_n, params: pmos });
    n.add(Device::Capacitor { name: "C1".into(), a: out1, b: 0, farads: load_cap });
    for k in 1..=fanout {
        let out = n.node(&format!("out2_{k}"));
        n.add(Device::Mosfet { name: format!("MN2_{k}"), drain: out, gate: out1, source: 0, params: nmos });
        n.add(Device::Mosfet { name: format!("MP2_{k}"), drain: out, gate: out1, source: vdd_n, params: pmos });
        n.add(Device::Capacitor { name: format!("C2_{k}"), a: out, b: 0, farads: load_cap });
    }
    n.validate()?;
    Ok(n)
}

/// Returns a copy of `n` with a SET source named `ISET` across the drain and
/// source of `target`, which must be an NMOS that is off at the operating
/// point.
pub fn inject_set(
    n: &Netlist,
    target: &str,
    waveform: SetWaveform,
    t_strike: f64,
    let_value: f64,
    binding: VdBinding,
) -> Result<Netlist, SpiceError> {
    let (drain, gate, source, params) = match n.device(target) {
        Some(Device::Mosfet { drain, gate, source, params, .. }) => (*drain, *gate, *source, *params),
        Some(_) => {
            return Err(SpiceError::NotOffNmos { name: target.into(), message: "not a MOSFET".into() });
        }
        None => return Err(SpiceError::TargetNotFound(target.into())),
    };
    if params.kind != MosKind::Nmos {
        return Err(SpiceError::NotOffNmos { name: target.into(), message: "device is a PMOS".into() });
    }
    let op = dc_operating_point(n)?;
    let vgs = op.voltage(gate) - op.voltage(source);
    if vgs > params.vth {
        return Err(SpiceError::NotOffNmos { name: target.into(), message: format!("vgs = {vgs} V exceeds vth") });
    }
    let mut out = n.clone();
    let mut name = "ISET".to_string();
    let mut k = 1;
    while out.device(&name).is_some() {
        k += 1;
        name = format!("ISET{k}");
    }
    out.add(Device::Set(SetSource { name, drain, source, waveform, let_value, t_strike, binding }));
    out.validate()?;
    Ok(out)
}

/// Node voltages (ground included at index 0) of a solved circuit.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    voltages: Vec<f64>,
}

impl OperatingPoint {
    pub fn voltage(&self, node: usize) -> f64 {
        self.voltages[node]
    }
}

#[derive(Debug, Clone, Copy)]
struct CapState {
    v: f64,
    i: f64,
}

enum Mode<'a> {
    Dc { scale: f64 },
    Tran { h: f64, caps: &'a [CapState] },
}

struct System<'a> {
    net: &'a Netlist,
    n_nodes: usize,
    vsrc_row: Vec<Option<usize>>,
    /// Resolved vd for sources with a non-instantaneous binding.
    fixed_vd: Vec<Option<f64>>,
}

impl<'a> System<'a> {
    fn new(net: &'a Netlist) -> Self {
        let n_nodes = net.nodes.len() - 1;
        let mut next = n_nodes;
        let vsrc_row = net
            .devices
            .iter()
            .map(|d| {
                matches!(d, Device::VoltageSource { .. }).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self { net, n_nodes, vsrc_row, fixed_vd: vec![None; net.devices.len()] }
    }

    fn size(&self) -> usize {
        self.n_nodes + self.vsrc_row.iter().flatten().count()
    }

    fn v(x: &DVector<f64>, node: usize) -> f64 {
        if node == 0 {
            0.0
        } else {
            x[node - 1]
        }
    }

    fn set_vd(&self, k: usize, s: &SetSource, x: &DVector<f64>) -> f64 {
        self.fixed_vd[k].unwrap_or_else(|| Self::v(x, s.drain) - Self::v(x, s.source))
    }

    /// Residual (currents leaving each node, then source constraints) and
    /// its Jacobian at `x`, time `t`. Also returns each SET source's current.
    fn assemble(&self, x: &DVector<f64>, t: f64, mode: &Mode) -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
        let size = self.size();
        let mut f = DVector::zeros(size);
        let mut jac = DMatrix::zeros(size, size);
        let mut set_i = vec![0.0; self.net.devices.len()];
        let add_f = |f: &mut DVector<f64>, node: usize, val: f64| {
            if node != 0 {
                f[node - 1] += val;
            }
        };
        let add_j = |j: &mut DMatrix<f64>, row: usize, node: usize, val: f64| {
            if node != 0 {
                j[(row, node - 1)] += val;
            }
        };
        // Two-terminal conductance-like stamp: current `i` leaves `a`, enters
        // `b`, with d i / d(va - vb) = g.
        let branch = |f: &mut DVector<f64>, j: &mut DMatrix<f64>, a: usize, b: usize, i: f64, g: f64| {
            add_f(f, a, i);
            add_f(f, b, -i);
            if a != 0 {
                add_j(j, a - 1, a, g);
                add_j(j, a - 1, b, -g);
            }
            if b != 0 {
                add_j(j, b - 1, a, -g);
                add_j(j, b - 1, b, g);
            }
        };
        for n in 1..=self.n_nodes {
            f[n - 1] += GMIN * x[n - 1];
            jac[(n - 1, n - 1)] += GMIN;
        }
        let mut cap_k = 0;
        for (k, d) in self.net.devices.iter().enumerate() {
            match d {
                Device::Mosfet { drain, gate, source, params, .. } => {
                    let (vd, vg, vs) = (Self::v(x, *drain), Self::v(x, *gate), Self::v(x, *source));
                    let (id, gm, gds) = mosfet_eval(params, vg - vs, vd - vs);
                    add_f(&mut f, *drain, id);
                    add_f(&mut f, *source, -id);
                    for (row_node, sign) in [(*drain, 1.0), (*source, -1.0)] {
                        if row_node != 0 {
                            let r = row_node - 1;
                            add_j(&mut jac, r, *gate, sign * gm);
                            add_j(&mut jac, r, *drain, sign * gds);
                            add_j(&mut jac, r, *source, -sign * (gm + gds));
                        }
                    }
                }
                Device::Resistor { a, b, ohms, .. } => {
                    let g = 1.0 / ohms;
                    let i = g * (Self::v(x, *a) - Self::v(x, *b));
                    branch(&mut f, &mut jac, *a, *b, i, g);
                }
                Device::Capacitor { a, b, farads, .. } => {
                    if let Mode::Tran { h, caps } = mode {
                        let geq = 2.0 * farads / h;
                        let st = caps[cap_k];
                        let i = geq * (Self::v(x, *a) - Self::v(x, *b) - st.v) - st.i;
                        branch(&mut f, &mut jac, *a, *b, i, geq);
                    }
                    cap_k += 1;
                }
                Device::VoltageSource { pos, neg, dc, step, .. } => {
                    let row = self.vsrc_row[k].expect("voltage source row");
                    let value = match mode {
                        Mode::Dc { scale } => dc * scale,
                        Mode::Tran { .. } => match step {
                            Some((v1, ts)) if t > *ts => *v1,
                            _ => *dc,
                        },
                    };
                    let j = x[row];
                    add_f(&mut f, *pos, j);
                    add_f(&mut f, *neg, -j);
                    if *pos != 0 {
                        jac[(*pos - 1, row)] += 1.0;
                    }
                    if *neg != 0 {
                        jac[(*neg - 1, row)] -= 1.0;
                    }
                    f[row] = Self::v(x, *pos) - Self::v(x, *neg) - value;
                    add_j(&mut jac, row, *pos, 1.0);
                    add_j(&mut jac, row, *neg, -1.0);
                }
                Device::Set(s) => {
                    let ts = t - s.t_strike;
                    let vd = self.set_vd(k, s, x);
                    let i = s.waveform.current(ts, s.let_value, vd);
                    let g = if self.fixed_vd[k].is_none() && i != 0.0 {
                        let ip = s.waveform.current(ts, s.let_value, vd + VD_FD_STEP);
                        let im = s.waveform.current(ts, s.let_value, vd - VD_FD_STEP);
                        (ip - im) / (2.0 * VD_FD_STEP)
                    } else {
                        0.0
                    };
                    set_i[k] = i;
                    branch(&mut f, &mut jac, s.drain, s.source, i, g);
                }
            }
        }
        (f, jac, set_i)
    }

    fn newton(&self, x0: &DVector<f64>, t: f64, mode: &Mode) -> Option<(DVector<f64>, Vec<f64>)> {
        let mut x = x0.clone();
        let mut last_dv = f64::INFINITY;
        for iter in 0..=MAX_NEWTON_ITERS {
            let (f, jac, set_i) = self.assemble(&x, t, mode);
            if f.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let resid = f.amax();
            if iter > 0 && resid <= RESIDUAL_TOL && last_dv <= STEP_TOL {
                return Some((x, set_i));
            }
            if iter == MAX_NEWTON_ITERS {
                return None;
            }
            let mut dx = jac.lu().solve(&(-f))?;
            last_dv = 0.0;
            for k in 0..dx.len() {
                if k < self.n_nodes {
                    dx[k] = dx[k].clamp(-MAX_NEWTON_DV, MAX_NEWTON_DV);
                    last_dv = f64::max(last_dv, dx[k].abs());
                }
            }
            x += dx;
        }
        None
    }

    fn dc(&self) -> Result<DVector<f64>, SpiceError> {
        let zero = DVector::zeros(self.size());
        if let Some((x, _)) = self.newton(&zero, 0.0, &Mode::Dc { scale: 1.0 }) {
            return Ok(x);
        }
        // Source stepping.
        let mut x = zero;
        for k in 1..=20 {
            let scale = k as f64 / 20.0;
            x = self.newton(&x, 0.0, &Mode::Dc { scale }).ok_or(SpiceError::DcFailed)?.0;
        }
        Ok(x)
    }
}

/// DC solution with capacitors open.
pub fn dc_operating_point(n: &Netlist) -> Result<OperatingPoint, SpiceError> {
    n.validate()?;
    let sys = System::new(n);
    let x = sys.dc()?;
    let mut voltages = vec![0.0];
    voltages.extend(x.iter().take(sys.n_nodes).copied());
    Ok(OperatingPoint { voltages })
}

/// Accepted timepoints of a transient run.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientTrace {
    /// Non-ground node names, in netlist order.
    pub node_names: Vec<String>,
    pub set_names: Vec<String>,
    pub times: Vec<f64>,
    /// `voltages[k][j]`: node `j` at `times[k]`.
    pub voltages: Vec<Vec<f64>>,
    /// `set_currents[k][j]`: SET source `j` at `times[k]`, A.
    pub set_currents: Vec<Vec<f64>>,
}

impl TransientTrace {
    pub fn node(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.node_names.iter().position(|n| n == name)?;
        Some(self.voltages.iter().map(|row| row[j]).collect())
    }

    pub fn set_current(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.set_names.iter().position(|n| n == name)?;
        Some(self.set_currents.iter().map(|row| row[j]).collect())
    }

    /// Voltages of the netlist node with index `node` (0 = ground).
    fn node_by_index(&self, node: usize) -> Vec<f64> {
        if node == 0 {
            vec![0.0; self.times.len()]
        } else {
            self.voltages.iter().map(|row| row[node - 1]).collect()
        }
    }

    /// CSV with header `t,<node>...,i_<source>...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(self.node_names.iter().cloned());
        header.extend(self.set_names.iter().map(|n| format!("i_{n}")));
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for k in 0..self.times.len() {
            line.clear();
            let _ = write!(line, "{}", self.times[k]);
            for v in self.voltages[k].iter().chain(&self.set_currents[k]) {
                let _ = write!(line, ",{v}");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

/// Transient analysis from the DC operating point to `t_stop` with nominal
/// step `dt`.
pub fn transient(n: &Netlist, t_stop: f64, dt: f64) -> Result<TransientTrace, SpiceError> {
    if !(dt > 0.0 && dt.is_finite() && t_stop > 0.0 && t_stop.is_finite()) {
        return Err(SpiceError::InvalidParams(format!("need dt > 0 and t_stop > 0, got dt={dt} t_stop={t_stop}")));
    }
    n.validate()?;
    let mut sys = System::new(n);
    let mut x = sys.dc()?;
    for (k, d) in n.devices.iter().enumerate() {
        if let Device::Set(s) = d {
            sys.fixed_vd[k] = match s.binding {
                VdBinding::Instantaneous => None,
                VdBinding::PreStrike => Some(System::v(&x, s.drain) - System::v(&x, s.source)),
                VdBinding::Fixed(v) => Some(v),
            };
        }
    }
    let cap_terms: Vec<(usize, usize, f64)> = n
        .devices
        .iter()
        .filter_map(|d| match d {
            Device::Capacitor { a, b, farads, .. } => Some((*a, *b, *farads)),
            _ => None,
        })
        .collect();
    let mut caps: Vec<CapState> = cap_terms
        .iter()
        .map(|&(a, b, _)| CapState { v: System::v(&x, a) - System::v(&x, b), i: 0.0 })
        .collect();
    let set_idx: Vec<usize> =
        n.devices.iter().enumerate().filter(|(_, d)| matches!(d, Device::Set(_))).map(|(k, _)| k).collect();

    let mut trace = TransientTrace {
        node_names: n.nodes[1..].to_vec(),
        set_names: set_idx.iter().map(|&k| n.devices[k].name().to_string()).collect(),
        times: Vec::new(),
        voltages: Vec::new(),
        set_currents: Vec::new(),
    };
    let record = |trace: &mut TransientTrace, t: f64, x: &DVector<f64>, set_i: &[f64]| {
        trace.times.push(t);
        trace.voltages.push(x.iter().take(sys.n_nodes).copied().collect());
        trace.set_currents.push(set_idx.iter().map(|&k| set_i[k]).collect());
    };
    let (_, _, set0) = sys.assemble(&x, 0.0, &Mode::Dc { scale: 1.0 });
    record(&mut trace, 0.0, &x, &set0);

    let h_min = dt / MIN_STEP_DIVISOR;
    let n_steps = (t_stop / dt - 1e-9).ceil().max(1.0) as usize;
    let mut t = 0.0;
    for k in 1..=n_steps {
        let target = (k as f64 * dt).min(t_stop);
        while t < target {
            let mut h = target - t;
            loop {
                let t_next = if h == target - t { target } else { t + h };
                if let Some((xn, set_i)) = sys.newton(&x, t_next, &Mode::Tran { h, caps: &caps }) {
                    for (st, &(a, b, c)) in caps.iter_mut().zip(&cap_terms) {
                        let v = System::v(&xn, a) - System::v(&xn, b);
                        st.i = 2.0 * c / h * (v - st.v) - st.i;
                        st.v = v;
                    }
                    x = xn;
                    t = t_next;
                    record(&mut trace, t, &x, &set_i);
                    break;
                }
                h *= 0.5;
                if h < h_min * (1.0 - 1e-12) {
                    return Err(SpiceError::NonConvergence { t: t + 2.0 * h, step: 2.0 * h });
                }
            }
        }
    }
    Ok(trace)
}

/// Depth of the dip below `v_ref`: `v_ref - min(v)`.
pub fn perturbation_depth(v: &[f64], v_ref: f64) -> f64 {
    v_ref - v.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// KCL bookkeeping at the drain node of a SET source over a whole trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeBalance {
    /// Charge removed from the node by the SET source, C.
    pub injected: f64,
    /// Charge delivered into the node by PMOS devices, C.
    pub restoring: f64,
    /// Net change of the charge on capacitors attached to the node, C.
    pub capacitor: f64,
    /// Charge leaving through every other path (NMOS, resistors, gmin), C.
    pub other: f64,
}

impl ChargeBalance {
    /// `|injected - (restoring - capacitor - other)| / |injected|`.
    pub fn relative_error(&self) -> f64 {
        (self.injected - (self.restoring - self.capacitor - self.other)).abs() / self.injected.abs()
    }
}

pub fn charge_balance(n: &Netlist, trace: &TransientTrace, set_name: &str) -> Result<ChargeBalance, SpiceError> {
    let node = match n.device(set_name) {
        Some(Device::Set(s)) => s.drain,
        _ => return Err(SpiceError::TargetNotFound(set_name.into())),
    };
    if node == 0 {
        return Err(SpiceError::Unsupported("SET source drain is ground".into()));
    }
    let ts = &trace.times;
    let v_node = trace.node_by_index(node);
    let mut cb = ChargeBalance { injected: 0.0, restoring: 0.0, capacitor: 0.0, other: 0.0 };
    cb.other += GMIN * trapezoid(ts, &v_node);
    for d in &n.devices {
        match d {
            Device::Set(s) if s.drain == node || s.source == node => {
                let j = trace.set_names.iter().position(|x| *x == s.name).expect("traced source");
                let i: Vec<f64> = trace.set_currents.iter().map(|row| row[j]).collect();
                let q = trapezoid(ts, &i);
                if s.name == set_name {
                    cb.injected += q;
                } else {
                    cb.other += if s.drain == node { q } else { -q };
                }
            }
            Device::Mosfet { drain, gate, source, params, .. } if *drain == node || *source == node => {
                let (vd, vg, vs) = (trace.node_by_index(*drain), trace.node_by_index(*gate), trace.node_by_index(*source));
                let sign = if *drain == node { 1.0 } else { -1.0 };
                let i: Vec<f64> =
                    (0..ts.len()).map(|k| sign * mosfet_current(params, vg[k] - vs[k], vd[k] - vs[k])).collect();
                let q = trapezoid(ts, &i);
                match params.kind {
                    MosKind::Pmos => cb.restoring -= q,
                    MosKind::Nmos => cb.other += q,
                }
            }
            Device::Resistor { a, b, ohms, .. } if *a == node || *b == node => {
                let other = if *a == node { *b } else { *a };
                let vo = trace.node_by_index(other);
                let i: Vec<f64> = (0..ts.len()).map(|k| (v_node[k] - vo[k]) / ohms).collect();
                cb.other += trapezoid(ts, &i);
            }
            Device::Capacitor { a, b, farads, .. } if *a == node || *b == node => {
                let other = if *a == node { *b } else { *a };
                let vo = trace.node_by_index(other);
                let last = ts.len() - 1;
                cb.capacitor += farads * ((v_node[last] - vo[last]) - (v_node[0] - vo[0]));
            }
            Device::VoltageSource { pos, neg, .. } if *pos == node || *neg == node => {
                return Err(SpiceError::Unsupported("voltage source on the struck node".into()));
            }
            _ => {}
        }
    }
    Ok(cb)
}

/// Plateau current floor, fraction of peak.
pub const PLATEAU_FLOOR: f64 = 0.2;
/// Plateau slope bound, fraction of peak per second.
pub const PLATEAU_SLOPE: f64 = 0.05 / 200e-12;

/// Longest interval of at least `min_len` seconds where the current stays
/// above `PLATEAU_FLOOR * peak` and its slope within `PLATEAU_SLOPE * peak`.
pub fn detect_plateau(times: &[f64], current: &[f64], min_len: f64) -> Option<(f64, f64)> {
    let peak = current.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) || times.len() < 2 {
        return None;
    }
    let slope_max = PLATEAU_SLOPE * peak;
    let mut best: Option<(f64, f64)> = None;
    let mut start: Option<f64> = None;
    let close = |start: &mut Option<f64>, end: f64, best: &mut Option<(f64, f64)>| {
        if let Some(s) = start.take() {
            if end - s >= min_len && best.is_none_or(|(a, b)| end - s > b - a) {
                *best = Some((s, end));
            }
        }
    };
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let slope = (current[k + 1] - current[k]) / dt;
        let flat = slope.abs() <= slope_max && current[k].min(current[k + 1]) >= PLATEAU_FLOOR * peak;
        if flat {
            start.get_or_insert(times[k]);
        } else {
            close(&mut start, times[k], &mut best);
        }
    }
    close(&mut start, times[times.len() - 1], &mut best);
    best
}

/// Settings for the inverter-chain strike experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrikeConfig {
    pub vdd: f64,
    pub fanout: usize,
    pub load_cap: f64,
    pub t_strike: f64,
    pub t_stop: f64,
    pub dt: f64,
    pub binding: VdBinding,
}

impl Default for StrikeConfig {
    fn default() -> Self {
        Self {
            vdd: 1.8,
            fanout: 5,
            load_cap: 5e-15,
            t_strike: 200e-12,
            t_stop: 1e-9,
            dt: 1e-12,
            binding: VdBinding::Instantaneous,
        }
    }
}

/// Strikes `MN1` of the default chain at each LET. Runs are independent and
/// execute in parallel; results come back in input order.
pub fn let_sweep(
    waveform: &SetWaveform,
    lets: &[f64],
    cfg: &StrikeConfig,
) -> Result<Vec<(Netlist, TransientTrace)>, SpiceError> {
    let chain = build_inverter_chain(cfg.vdd, cfg.fanout, cfg.load_cap)?;
    lets.par_iter()
        .map(|&l| {
            let net = inject_set(&chain, "MN1", waveform.clone(), cfg.t_strike, l, cfg.binding)?;
            let trace = transient(&net, cfg.t_stop, cfg.dt)?;
            Ok((net, trace))
        })
        .collect()
}

/// Writes one trace CSV per LET into `dir` as `trace_let<LET>.csv`.
pub fn write_sweep_traces(dir: &Path, lets: &[f64], traces: &[TransientTrace]) -> Result<Vec<PathBuf>, SpiceError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (l, tr) in lets.iter().zip(traces) {
        let path = dir.join(format!("trace_let{l}.csv"));
        let file = std::fs::File::create(&path)?;
        tr.write_csv(std::io::BufWriter::new(file))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain() -> Netlist {
        build_inverter_chain(1.8, 5, 5e-15).unwrap()
    }

    fn oracle() -> SetWaveform {
        SetWaveform::Oracle(OracleParams::default())
    }

    #[test]
    fn mosfet_regions() {
        let mut p = MosParams::nmos_default();
        p.lambda = 0.0;
        p.w_over_l = 3.23;
        assert_eq!(mosfet_current(&p, 0.4, 1.0), 0.0);
        assert_eq!(mosfet_current(&p, -1.0, 1.0), 0.0);
        let expect = 0.5 * 250e-6 * 3.23 * 1.4 * 1.4;
        assert!((mosfet_current(&p, 1.8, 1.8) - expect).abs() < 1e-18);
        // Triode by hand: kp W/L ((vgs - vth) vds - vds^2 / 2).
        let tri = 250e-6 * 3.23 * (1.4 * 0.5 - 0.125);
        assert!((mosfet_current(&p, 1.8, 0.5) - tri).abs() < 1e-18);
    }

    #[test]
    fn mosfet_continuous_at_saturation_edge() {
        let p = MosParams::nmos_default();
        for vgs in [0.6, 1.0, 1.8] {
            let edge = vgs - p.vth;
            let lo = mosfet_current(&p, vgs, edge * (1.0 - 1e-12));
            let hi = mosfet_current(&p, vgs, edge);
            assert!((lo - hi).abs() <= 1e-9 * hi.abs());
        }
    }

    #[test]
    fn pmos_mirrors_nmos() {
        let n = MosParams::nmos_default();
        let p = MosParams { kind: MosKind::Pmos, vth: -n.vth, ..n };
        for (vgs, vds) in [(1.8, 0.3), (1.0, 1.5), (0.2, 1.0), (1.5, -0.4)] {
            assert_eq!(mosfet_current(&p, -vgs, -vds), -mosfet_current(&n, vgs, vds));
        }
    }

    #[test]
    fn reverse_bias_swaps_terminals() {
        let n = MosParams::nmos_default();
        // With vds < 0 the source acts as the drain: id(vgs, vds) = -id(vgs - vds, -vds).
        let (vgs, vds) = (0.0, -1.0);
        assert_eq!(mosfet_current(&n, vgs, vds), -mosfet_current(&n, vgs - vds, -vds));
        assert!(mosfet_current(&n, vgs, vds) < 0.0);
    }

    proptest! {
        #[test]
        fn mosfet_partials_match_differences(vgs in -1.8f64..1.8, vds in -1.8f64..1.8, pmos in proptest::bool::ANY) {
            let p = if pmos { MosParams::pmos_default() } else { MosParams::nmos_default() };
            let (_, gm, gds) = mosfet_eval(&p, vgs, vds);
            let h = 1e-7;
            let fd_g = (mosfet_current(&p, vgs + h, vds) - mosfet_current(&p, vgs - h, vds)) / (2.0 * h);
            let fd_d = (mosfet_current(&p, vgs, vds + h) - mosfet_current(&p, vgs, vds - h)) / (2.0 * h);
            let scale = 1e-3;
            prop_assert!((gm - fd_g).abs() < 1e-5 * scale + 1e-4 * gm.abs(), "gm {gm} fd {fd_g}");
            prop_assert!((gds - fd_d).abs() < 1e-5 * scale + 1e-4 * gds.abs(), "gds {gds} fd {fd_d}");
        }
    }

    #[test]
    fn chain_topology() {
        let n = chain();
        assert_eq!(n.mosfet_count(), 12);
        assert_eq!(n.mosfet_count() / 2, 6);
        let one = build_inverter_chain(1.8, 1, 5e-15).unwrap();
        assert_eq!(one.mosfet_count(), 4);
        assert!(n.validate().is_ok());
        assert!(matches!(build_inverter_chain(1.8, 0, 5e-15), Err(SpiceError::InvalidParams(_))));
    }

    #[test]
    fn lint_catches_bad_netlists() {
        let mut n = chain();
        n.add(Device::Capacitor { name: "CX".into(), a: 99, b: 0, farads: 1e-15 });
        assert!(matches!(n.validate(), Err(SpiceError::UnknownNode { node: 99, .. })));
        let mut n = chain();
        n.add(Device::Capacitor { name: "C1".into(), a: 1, b: 0, farads: 1e-15 });
        assert!(matches!(n.validate(), Err(SpiceError::DuplicateDevice(_))));
        let mut n = Netlist::new();
        let a = n.node("a");
        n.add(Device::Resistor { name: "R1".into(), a, b: 0, ohms: 1e3 });
        assert!(matches!(n.validate(), Err(SpiceError::NoVoltageSource)));
    }

    #[test]
    fn text_round_trip() {
        let n = inject_set(&chain(), "MN1", oracle(), 200e-12, 40.0, VdBinding::Fixed(1.2)).unwrap();
        let text = n.to_text();
        let back = Netlist::parse(&text, Path::new(".")).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.node_names(), n.node_names());
        let a = transient(&n, 400e-12, 1e-12).unwrap();
        let b = transient(&back, 400e-12, 1e-12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("V1 a 0 dc=1\nR1 a 0\n", 2),
            ("V1 a 0 dc=x\n", 1),
            ("* c\nV1 a 0 dc=1\nQ1 a 0 1\n", 3),
            ("V1 a 0 dc=1\nM1 a a 0 bjt vth=1 kp=1 wl=1 lambda=0\n", 2),
            ("V1 a 0 dc=1\nI1 a 0 set source=magic let=1 t_strike=0\n", 2),
            ("V1 a 0 dc=1 foo=2\n", 1),
        ];
        for (text, line) in cases {
            match Netlist::parse(text, Path::new(".")) {
                Err(SpiceError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        let missing = "V1 a 0 dc=1\nI1 a 0 set source=model:nope.txt let=1 t_strike=0\n";
        assert!(matches!(Netlist::parse(missing, Path::new("/nonexistent")), Err(SpiceError::Parse { line: 2, .. })));
    }

    #[test]
    fn unstruck_chain_is_static() {
        let tr = transient(&chain(), 1e-9, 1e-12).unwrap();
        let out1 = tr.node("out1").unwrap();
        assert!(out1.iter().all(|v| (v - 1.8).abs() < 1e-6));
        for k in 1..=5 {
            assert!(tr.node(&format!("out2_{k}")).unwrap().iter().all(|v| v.abs() < 1e-6));
        }
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(tr.times.len(), 1001);
        assert!((tr.times[1000] - 1e-9).abs() < 1e-24);
        assert!(tr.set_names.is_empty());
    }

    #[test]
    fn rc_step_response() {
        let text = "V1 in 0 dc=0 step=1 t_step=0\nR1 in out r=1000\nC1 out 0 c=1e-12\n";
        let n = Netlist::parse(text, Path::new(".")).unwrap();
        let tr = transient(&n, 1e-9, 1e-12).unwrap();
        let v = tr.node("out").unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        let got = *v.last().unwrap();
        assert!((got - expect).abs() < 1e-3 * expect, "{got} vs {expect}");
    }

    #[test]
    fn no_current_before_strike() {
        let n = inject_set(&chain(), "MN1", oracle(), 200e-12, 80.0, VdBinding::Instantaneous).unwrap();
        let tr = transient(&n, 400e-12, 1e-12).unwrap();
        let i = tr.set_current("ISET").unwrap();
        for (t, i) in tr.times.iter().zip(&i) {
            if *t < 200e-12 {
                assert_eq!(*i, 0.0);
            }
        }
        assert!(i.iter().any(|&x| x > 1e-4));
    }

    #[test]
    fn disabled_source_matches_unstruck() {
        let base = chain();
        let n = inject_set(&base, "MN1", oracle(), 200e-12, 0.0, VdBinding::Instantaneous).unwrap();
        let a = transient(&base, 1e-9, 1e-12).unwrap();
        let b = transient(&n, 1e-9, 1e-12).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.voltages, b.voltages);
        assert!(b.set_current("ISET").unwrap().iter().all(|&i| i == 0.0));
    }

    #[test]
    fn inject_rejects_bad_targets() {
        let n = chain();
        assert!(matches!(
            inject_set(&n, "MX", oracle(), 0.0, 1.0, VdBinding::Instantaneous),
            Err(SpiceError::TargetNotFound(_))
        ));
        assert!(matches!(
            inject_set(&n, "MP1", oracle(), 0.0, 1.0, VdBinding::Instantaneous),
            Err(SpiceError::NotOffNmos { .. })
        ));
        // Stage-2 NMOS gates sit at vdd, so these devices are on.
        assert!(matches!(
            inject_set(&n, "MN2_1", oracle(), 0.0, 1.0, VdBinding::Instantaneous),
            Err(SpiceError::NotOffNmos { .. })
        ));
        assert!(matches!(
            inject_set(&n, "C1", oracle(), 0.0, 1.0, VdBinding::Instantaneous),
            Err(SpiceError::NotOffNmos { .. })
        ));
    }

    #[test]
    fn injected_charge_matches_oracle() {
        let p = OracleParams::default();
        let n = inject_set(&chain(), "MN1", oracle(), 200e-12, 40.0, VdBinding::Fixed(1.8)).unwrap();
        // Ten fall time constants after the strike.
        let tr = transient(&n, 2.2e-9, 1e-12).unwrap();
        let q = trapezoid(&tr.times, &tr.set_current("ISET").unwrap());
        let expect = crate::oracle::collected_charge(40.0, 1.8, &p).unwrap();
        assert!((q - expect).abs() < 5e-3 * expect, "{q} vs {expect}");
    }

    #[test]
    fn struck_node_charge_balances() {
        for binding in [VdBinding::Instantaneous, VdBinding::PreStrike] {
            for l in [5.0, 80.0] {
                let n = inject_set(&chain(), "MN1", oracle(), 200e-12, l, binding).unwrap();
                let tr = transient(&n, 1e-9, 1e-12).unwrap();
                let cb = charge_balance(&n, &tr, "ISET").unwrap();
                assert!(cb.injected > 0.0 && cb.restoring > 0.0);
                assert!(cb.relative_error() < 1e-2, "{binding:?} {l}: {cb:?}");
            }
        }
    }

    #[test]
    fn strike_depth_grows_with_let() {
        let cfg = StrikeConfig::default();
        let lets = [5.0, 20.0, 40.0, 60.0, 80.0];
        let runs = let_sweep(&oracle(), &lets, &cfg).unwrap();
        let depths: Vec<f64> = runs.iter().map(|(_, t)| perturbation_depth(&t.node("out1").unwrap(), 1.8)).collect();
        assert!(depths.windows(2).all(|w| w[1] >= w[0]), "{depths:?}");
        let v = runs[4].1.node("out1").unwrap();
        assert!(v.iter().any(|&x| x < 0.9));
        assert!(*v.last().unwrap() > 0.9);
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = StrikeConfig { t_stop: 500e-12, ..Default::default() };
        let a = let_sweep(&oracle(), &[20.0, 80.0], &cfg).unwrap();
        let b = let_sweep(&oracle(), &[20.0, 80.0], &cfg).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            assert_eq!(x.to_csv_string(), y.to_csv_string());
        }
    }

    #[test]
    fn trace_csv_layout() {
        let n = inject_set(&chain(), "MN1", oracle(), 200e-12, 5.0, VdBinding::Instantaneous).unwrap();
        let tr = transient(&n, 10e-12, 1e-12).unwrap();
        let csv = tr.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,vdd,in,out1,out2_1,out2_2,out2_3,out2_4,out2_5,i_ISET");
        assert_eq!(lines.count(), 11);
    }

    #[test]
    fn plateau_detection() {
        let times: Vec<f64> = (0..=300).map(|k| k as f64 * 1e-12).collect();
        // Ramp up, hold for 50 ps, then ramp down.
        let flat: Vec<f64> = times
            .iter()
            .map(|&t| {
                let t = t * 1e12;
                if t < 100.0 {
                    t / 100.0
                } else if t <= 150.0 {
                    1.0
                } else {
                    (1.0 - (t - 150.0) / 100.0).max(0.0)
                }
            })
            .collect();
        let (a, b) = detect_plateau(&times, &flat, 20e-12).unwrap();
        assert!((a - 100e-12).abs() < 1.5e-12 && (b - 150e-12).abs() < 1.5e-12, "{a} {b}");
        assert!(detect_plateau(&times, &flat, 60e-12).is_none());
        // The double-exponential tail alone never qualifies.
        let p = OracleParams::default();
        let pulse = crate::oracle::DoubleExp::new(80.0, 1.8, &p).unwrap();
        let de: Vec<f64> = times.iter().map(|&t| pulse.current(t)).collect();
        assert!(detect_plateau(&times, &de, 20e-12).is_none());
        assert!(detect_plateau(&times, &vec![0.0; times.len()], 20e-12).is_none());
    }

    #[test]
    fn bad_analysis_parameters() {
        assert!(matches!(transient(&chain(), 1e-9, 0.0), Err(SpiceError::InvalidParams(_))));
        assert!(matches!(transient(&chain(), -1.0, 1e-12), Err(SpiceError::InvalidParams(_))));
    }
}
