//! Verilog-A export of a trained model, plus an evaluator for the expression
//! subset the generator emits.
//!
//! The emitted module is a two-terminal current source `I(p, n)` driven by
//! `$abstime - t_strike`, the `let_value` and `vd` parameters, and the network
//! weights embedded as 17-significant-digit literals. The evaluator parses the
//! `analog` block back and runs it, so the generated text can be checked
//! against [`MlpModel::predict_current`] without an external simulator.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mlp::{fmt_f64, MlpModel, Transfer};

#[derive(Debug, Error, PartialEq)]
pub enum VaError {
    #[error("`{0}` is not a legal Verilog-A identifier")]
    BadIdentifier(String),
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("unbound identifier `{0}`")]
    Unbound(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("module has no current contribution")]
    NoContribution,
}

/// Role of an embedded constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolKind {
    Weight,
    Bias,
    Norm,
    /// Default of a module parameter (`let_value`, `vd`, `t_strike`).
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Symbol {
    pub name: String,
    pub value: f64,
    pub kind: SymbolKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaModule {
    pub module_name: String,
    pub source_text: String,
    pub symbols: Vec<Symbol>,
}

impl VaModule {
    /// Number of weight and bias literals embedded in the network section.
    pub fn network_literal_count(&self) -> usize {
        self.symbols.iter().filter(|s| matches!(s.kind, SymbolKind::Weight | SymbolKind::Bias)).count()
    }

    pub fn program(&self) -> Result<Program, VaError> {
        Program::parse(&self.source_text)
    }
}

const KEYWORDS: &[&str] = &[
    "module", "endmodule", "analog", "begin", "end", "parameter", "real", "integer", "inout", "input",
    "output", "electrical", "if", "else", "for", "while", "case", "endcase", "function", "exp", "ln",
    "log", "tanh", "abs", "pow", "sqrt", "from", "exclude", "inf", "branch", "let",
];

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !KEYWORDS.contains(&s)
}

fn signed_term(out: &mut String, first: bool, coeff: f64, var: &str) {
    if first {
        let _ = write!(out, "{}*{var}", fmt_f64(coeff));
    } else if coeff.is_sign_negative() {
        let _ = write!(out, " - {}*{var}", fmt_f64(-coeff));
    } else {
        let _ = write!(out, " + {}*{var}", fmt_f64(coeff));
    }
}

/// Emits `m` as a Verilog-A module named `module_name`. `t_strike_default`
/// is the default strike time in seconds.
pub fn export_verilog_a(m: &MlpModel, module_name: &str, t_strike_default: f64) -> Result<VaModule, VaError> {
    if !is_identifier(module_name) {
        return Err(VaError::BadIdentifier(module_name.to_string()));
    }
    let norm = m.norm();
    let dims: Vec<String> = m.layer_dims().iter().map(|d| d.to_string()).collect();
    let mut symbols = Vec::new();
    let mut s = String::new();

    let let_default = 0.5 * (norm.let_value.min + norm.let_value.max);
    let vd_default = norm.vd.max;
    symbols.push(Symbol { name: "let_value".into(), value: let_default, kind: SymbolKind::Default });
    symbols.push(Symbol { name: "vd".into(), value: vd_default, kind: SymbolKind::Default });
    symbols.push(Symbol { name: "t_strike".into(), value: t_strike_default, kind: SymbolKind::Default });

    let _ = writeln!(s, "// SET drain current source, {} feedforward network.", dims.join("-"));
    let _ = writeln!(s, "// Inputs: time since strike (s), let_value (MeV*cm^2/mg), vd (V). Output in A.");
    let _ = writeln!(s, "`include \"constants.vams\"");
    let _ = writeln!(s, "`include \"disciplines.vams\"");
    let _ = writeln!(s);
    let _ = writeln!(s, "module {module_name}(p, n);");
    let _ = writeln!(s, "    inout p, n;");
    let _ = writeln!(s, "    electrical p, n;");
    let _ = writeln!(s);
    let _ = writeln!(s, "    parameter real let_value = {let_default:?} from (0:inf);");
    let _ = writeln!(s, "    parameter real vd = {vd_default:?} from [0:inf);");
    let _ = writeln!(s, "    parameter real t_strike = {t_strike_default:?} from [0:inf);");
    let _ = writeln!(s);

    let mut decls = vec!["ts".to_string(), "xt".into(), "xl".into(), "xv".into()];
    for name in ["t_min", "t_max", "let_min", "let_max", "vd_min", "vd_max", "i_min", "i_max"] {
        decls.push(name.to_string());
    }
    for (li, l) in m.layers().iter().enumerate() {
        for i in 0..l.outputs() {
            decls.push(format!("n{}_{i}", li + 1));
            if li + 1 < m.layers().len() {
                decls.push(format!("h{}_{i}", li + 1));
            }
        }
    }
    decls.push("y".into());
    for chunk in decls.chunks(8) {
        let _ = writeln!(s, "    real {};", chunk.join(", "));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "    analog begin");

    let _ = writeln!(s, "        // normalization");
    let chans = [
        ("t", norm.time),
        ("let", norm.let_value),
        ("vd", norm.vd),
        ("i", norm.current),
    ];
    for (name, c) in chans {
        let _ = writeln!(s, "        {name}_min = {};", fmt_f64(c.min));
        let _ = writeln!(s, "        {name}_max = {};", fmt_f64(c.max));
        symbols.push(Symbol { name: format!("{name}_min"), value: c.min, kind: SymbolKind::Norm });
        symbols.push(Symbol { name: format!("{name}_max"), value: c.max, kind: SymbolKind::Norm });
    }
    let _ = writeln!(s, "        ts = $abstime - t_strike;");
    let _ = writeln!(s, "        ts = (ts > 0.0) ? ts : 0.0;");
    let _ = writeln!(s, "        xt = 2.0 * (ts - t_min) / (t_max - t_min) - 1.0;");
    let _ = writeln!(s, "        xl = 2.0 * (let_value - let_min) / (let_max - let_min) - 1.0;");
    let _ = writeln!(s, "        xv = 2.0 * (vd - vd_min) / (vd_max - vd_min) - 1.0;");

    let mut inputs: Vec<String> = vec!["xt".into(), "xl".into(), "xv".into()];
    let last = m.layers().len() - 1;
    for (li, l) in m.layers().iter().enumerate() {
        let _ = writeln!(s, "        // layer {}: {}x{} {}", li + 1, l.outputs(), l.inputs(), l.transfer());
        let mut outputs = Vec::with_capacity(l.outputs());
        for i in 0..l.outputs() {
            let net = format!("n{}_{i}", li + 1);
            let mut expr = String::new();
            let b = l.biases()[i];
            symbols.push(Symbol { name: format!("b{}[{i}]", li + 1), value: b, kind: SymbolKind::Bias });
            let _ = write!(expr, "{}", fmt_f64(b));
            for (j, input) in inputs.iter().enumerate() {
                let w = l.weight(i, j);
                symbols.push(Symbol { name: format!("w{}[{i}][{j}]", li + 1), value: w, kind: SymbolKind::Weight });
                signed_term(&mut expr, false, w, input);
            }
            let _ = writeln!(s, "        {net} = {expr};");
            if li == last {
                outputs.push(net);
                continue;
            }
            let act = format!("h{}_{i}", li + 1);
            let body = match l.transfer() {
                Transfer::Tansig => format!("tanh({net})"),
                Transfer::Logsig => format!("1.0 / (1.0 + exp(-{net}))"),
                Transfer::Elliotsig => format!("{net} / (1.0 + abs({net}))"),
                Transfer::Purelin => net.clone(),
            };
            let _ = writeln!(s, "        {act} = {body};");
            outputs.push(act);
        }
        inputs = outputs;
    }
    // Output layer is purelin with one neuron.
    let _ = writeln!(s, "        y = {};", inputs[0]);
    let _ = writeln!(s, "        I(p, n) <+ ($abstime >= t_strike) ? (y + 1.0) * 0.5 * (i_max - i_min) + i_min : 0.0;");
    let _ = writeln!(s, "    end");
    let _ = writeln!(s, "endmodule");

    Ok(VaModule { module_name: module_name.to_string(), source_text: s, symbols })
}

/// Evaluates the exported module at absolute time `t` with the given LET and
/// drain bias; `t_strike` keeps its default.
pub fn evaluate_exported(v: &VaModule, t: f64, let_value: f64, vd: f64) -> Result<f64, VaError> {
    v.program()?.current(t, let_value, vd, None)
}

/// Largest `|evaluated - predicted|` in amperes over `n` seeded random
/// points inside the model's training ranges. Both sides see the same
/// strike time, the module default.
pub fn golden_check(m: &MlpModel, v: &VaModule, n: usize, seed: u64) -> Result<f64, VaError> {
    let prog = v.program()?;
    let t_strike = v
        .symbols
        .iter()
        .find(|s| s.name == "t_strike")
        .map_or(0.0, |s| s.value);
    let norm = m.norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let ts = rng.random_range(norm.time.min..=norm.time.max);
        let l = rng.random_range(norm.let_value.min..=norm.let_value.max);
        let vd = rng.random_range(norm.vd.min..=norm.vd.max);
        let got = prog.current(t_strike + ts, l, vd, None)?;
        worst = worst.max((got - m.predict_current(ts, l, vd)).abs());
    }
    Ok(worst)
}

/// Evaluates a standalone expression from the supported subset.
pub fn eval_expression(text: &str, bindings: &HashMap<String, f64>) -> Result<f64, VaError> {
    let mut p = Parser::new(text)?;
    let e = p.expr()?;
    p.expect_end()?;
    e.eval(bindings)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Ln,
    Tanh,
    Abs,
    Pow,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "exp" => (Func::Exp, 1),
            "ln" => (Func::Ln, 1),
            "tanh" => (Func::Tanh, 1),
            "abs" => (Func::Abs, 1),
            "pow" => (Func::Pow, 2),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    Cond(Box<Expr>, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self, env: &HashMap<String, f64>) -> Result<f64, VaError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => *env.get(name).ok_or_else(|| VaError::Unbound(name.clone()))?,
            Expr::Neg(e) => -e.eval(env)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(env)?, b.eval(env)?);
                let truth = |c: bool| if c { 1.0 } else { 0.0 };
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Gt => truth(a > b),
                    BinOp::Ge => truth(a >= b),
                    BinOp::Lt => truth(a < b),
                    BinOp::Le => truth(a <= b),
                    BinOp::Eq => truth(a == b),
                }
            }
            Expr::Call(f, args) => {
                let x = args[0].eval(env)?;
                match f {
                    Func::Exp => x.exp(),
                    Func::Ln => x.ln(),
                    Func::Tanh => x.tanh(),
                    Func::Abs => x.abs(),
                    Func::Pow => x.powf(args[1].eval(env)?),
                }
            }
            Expr::Cond(c, a, b) => {
                if c.eval(env)? != 0.0 {
                    a.eval(env)?
                } else {
                    b.eval(env)?
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(&'static str),
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, VaError> {
    const SYMS: [&str; 18] = [
        "<+", ">=", "<=", "==", "+", "-", "*", "/", "(", ")", "?", ":", ",", ";", "=", ">", "<", "[",
    ];
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if text[i..].starts_with("//") {
            i = text[i..].find('\n').map_or(bytes.len(), |n| i + n);
        } else if c == '`' {
            // Compiler directive: skip the line.
            i = text[i..].find('\n').map_or(bytes.len(), |n| i + n);
        } else if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lit = &text[start..i];
            let v = lit.parse::<f64>().map_err(|_| VaError::Parse {
                pos: start,
                message: format!("bad number `{lit}`"),
            })?;
            out.push((start, Token::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' || c == '$' {
            let start = i;
            i += 1;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(text[start..i].to_string())));
        } else if let Some(sym) = SYMS.iter().find(|s| text[i..].starts_with(**s)) {
            out.push((i, Token::Sym(sym)));
            i += sym.len();
        } else {
            return Err(VaError::Parse { pos: i, message: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Token)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, VaError> {
        Ok(Self { toks: tokenize(text)?, pos: 0, len: text.len() })
    }

    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.len, |t| t.0)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, VaError> {
        Err(VaError::Parse { pos: self.here(), message: message.into() })
    }

    fn eat(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Token::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: &str) -> Result<(), VaError> {
        if self.eat(sym) {
            Ok(())
        } else {
            self.err(format!("expected `{sym}`"))
        }
    }

    fn eat_ident(&mut self, word: &str) -> bool {
        if matches!(self.peek(), Some(Token::Ident(w)) if w == word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String, VaError> {
        match self.peek() {
            Some(Token::Ident(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn expect_end(&self) -> Result<(), VaError> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            self.err("trailing input")
        }
    }

    fn expr(&mut self) -> Result<Expr, VaError> {
        let cond = self.comparison()?;
        if self.eat("?") {
            let a = self.expr()?;
            self.expect(":")?;
            let b = self.expr()?;
            return Ok(Expr::Cond(Box::new(cond), Box::new(a), Box::new(b)));
        }
        Ok(cond)
    }

    fn comparison(&mut self) -> Result<Expr, VaError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some(Token::Sym(">=")) => BinOp::Ge,
            Some(Token::Sym("<=")) => BinOp::Le,
            Some(Token::Sym(">")) => BinOp::Gt,
            Some(Token::Sym("<")) => BinOp::Lt,
            Some(Token::Sym("==")) => BinOp::Eq,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.additive()?;
        Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn additive(&mut self) -> Result<Expr, VaError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat("+") {
                BinOp::Add
            } else if self.eat("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, VaError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat("*") {
                BinOp::Mul
            } else if self.eat("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, VaError> {
        if self.eat("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat("+") {
            return self.unary();
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, VaError> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                if self.eat("(") {
                    let (f, arity) = Func::lookup(&name).ok_or(VaError::UnknownFunction(name.clone()))?;
                    let mut args = vec![self.expr()?];
                    while self.eat(",") {
                        args.push(self.expr()?);
                    }
                    self.expect(")")?;
                    if args.len() != arity {
                        return self.err(format!("`{name}` takes {arity} argument(s)"));
                    }
                    Ok(Expr::Call(f, args))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Token::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            _ => self.err("expected expression"),
        }
    }

    /// Skips tokens through the next `;`.
    fn skip_statement(&mut self) {
        while let Some(t) = self.peek() {
            let done = *t == Token::Sym(";");
            self.pos += 1;
            if done {
                break;
            }
        }
    }
}

/// Parsed module: parameter defaults plus the ordered analog statements.
#[derive(Debug, Clone)]
pub struct Program {
    defaults: Vec<(String, f64)>,
    assignments: Vec<(String, Expr)>,
    contribution: Expr,
}

impl Program {
    pub fn parse(text: &str) -> Result<Self, VaError> {
        let mut p = Parser::new(text)?;
        let mut defaults = Vec::new();
        let mut assignments = Vec::new();
        let mut contribution = None;

        // Module header and declarations.
        while p.peek().is_some() {
            if p.eat_ident("parameter") {
                p.eat_ident("real");
                let name = p.ident()?;
                p.expect("=")?;
                let value = p.expr()?.eval(&HashMap::new())?;
                defaults.push((name, value));
                p.skip_statement();
            } else if p.eat_ident("analog") {
                break;
            } else {
                p.skip_statement();
            }
        }
        if !p.eat_ident("begin") {
            return p.err("expected `analog begin`");
        }
        loop {
            if p.eat_ident("end") {
                break;
            }
            let name = p.ident()?;
            if name == "I" && p.eat("(") {
                p.ident()?;
                p.expect(",")?;
                p.ident()?;
                p.expect(")")?;
                p.expect("<+")?;
                contribution = Some(p.expr()?);
            } else {
                p.expect("=")?;
                assignments.push((name, p.expr()?));
            }
            p.expect(";")?;
        }
        if !p.eat_ident("endmodule") {
            return p.err("expected `endmodule`");
        }
        p.expect_end()?;
        Ok(Self { defaults, assignments, contribution: contribution.ok_or(VaError::NoContribution)? })
    }

    /// Contributed current at absolute time `t`. `t_strike` overrides the
    /// module default when given.
    pub fn current(&self, t: f64, let_value: f64, vd: f64, t_strike: Option<f64>) -> Result<f64, VaError> {
        let mut env: HashMap<String, f64> = self.defaults.iter().cloned().collect();
        env.insert("$abstime".into(), t);
        env.insert("let_value".into(), let_value);
        env.insert("vd".into(), vd);
        if let Some(ts) = t_strike {
            env.insert("t_strike".into(), ts);
        }
        for (name, e) in &self.assignments {
            let v = e.eval(&env)?;
            env.insert(name.clone(), v);
        }
        self.contribution.eval(&env)
    }
}
