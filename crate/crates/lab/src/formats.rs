//! Plain-text dataset and checkpoint files.
//!
//! Numbers are written with 17 significant digits (`{:.16e}`), which round-trips
//! every `f64` exactly. Center and class indices are 1-based in files.

use std::fmt::Write as _;

use sane_core::contrastive::{DenseLayer, MlpEncoder};
use sane_core::numerics::Matrix;
use sane_core::shallow_net::{Activation, ShallowNet};
use sane_core::synthdata::{CenterSet, CropDataset};

use crate::error::{LabError, Result};

fn push_reals(line: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(line, " {v:.16e}");
    }
}

fn format_err(msg: impl Into<String>) -> LabError {
    LabError::Format(msg.into())
}

/// Whitespace-token reader that reports line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    what: &'static str,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, what: &'static str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            what,
        }
    }

    fn next_tokens(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok((i + 1, tokens));
            }
        }
        Err(format_err(format!("{}: unexpected end of file", self.what)))
    }

    fn expect_end(&mut self) -> Result<()> {
        match self.inner.by_ref().find(|(_, l)| !l.trim().is_empty()) {
            Some((i, _)) => Err(format_err(format!("{}: trailing content on line {}", self.what, i + 1))),
            None => Ok(()),
        }
    }
}

fn parse_tok<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| format_err(format!("{what}: line {line}: cannot parse `{tok}`")))
}

fn parse_reals(toks: &[&str], line: usize, what: &str) -> Result<Vec<f64>> {
    toks.iter().map(|t| parse_tok(t, line, what)).collect()
}

fn index_1based(tok: &str, line: usize, what: &str, bound: usize) -> Result<usize> {
    let i: usize = parse_tok(tok, line, what)?;
    if i == 0 || i > bound {
        return Err(format_err(format!("{what}: line {line}: index {i} outside 1..={bound}")));
    }
    Ok(i - 1)
}

/// Header `K K̄ d n ε δ ρ`, one `γ class_index c…` line per center, then one
/// `center_of y_star y x…` line per crop.
pub fn write_dataset(centers: &CenterSet, data: &CropDataset, delta: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {} {:.16e} {:.16e} {:.16e}",
        centers.len(),
        data.class_values.len(),
        data.dim(),
        data.len(),
        data.epsilon,
        delta,
        data.rho
    );
    for c in 0..centers.len() {
        let mut line = format!("{:.16e} {}", centers.value_of(c), centers.class_index[c] + 1);
        push_reals(&mut line, centers.centers.row(c));
        out.push_str(&line);
        out.push('\n');
    }
    for i in 0..data.len() {
        let mut line = format!("{} {:.16e} {:.16e}", data.center_of[i] + 1, data.y_star[i], data.y[i]);
        push_reals(&mut line, data.crops.row(i));
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// A dataset file's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub centers: CenterSet,
    pub data: CropDataset,
    pub delta: f64,
}

pub fn read_dataset(text: &str) -> Result<DatasetFile> {
    const WHAT: &str = "dataset";
    let mut lines = Lines::new(text, WHAT);
    let (ln, head) = lines.next_tokens()?;
    if head.len() != 7 {
        return Err(format_err(format!("{WHAT}: header needs 7 fields, found {}", head.len())));
    }
    let k: usize = parse_tok(head[0], ln, WHAT)?;
    let classes: usize = parse_tok(head[1], ln, WHAT)?;
    let d: usize = parse_tok(head[2], ln, WHAT)?;
    let n: usize = parse_tok(head[3], ln, WHAT)?;
    let epsilon: f64 = parse_tok(head[4], ln, WHAT)?;
    let delta: f64 = parse_tok(head[5], ln, WHAT)?;
    let rho: f64 = parse_tok(head[6], ln, WHAT)?;

    let mut class_values: Vec<Option<f64>> = vec![None; classes];
    let mut class_index = Vec::with_capacity(k);
    let mut center_rows = Vec::with_capacity(k * d);
    for _ in 0..k {
        let (ln, toks) = lines.next_tokens()?;
        if toks.len() != d + 2 {
            return Err(format_err(format!("{WHAT}: line {ln}: center needs {} fields", d + 2)));
        }
        let gamma: f64 = parse_tok(toks[0], ln, WHAT)?;
        let idx = index_1based(toks[1], ln, WHAT, classes)?;
        match class_values[idx] {
            Some(g) if g != gamma => {
                return Err(format_err(format!("{WHAT}: line {ln}: class {} has two values", idx + 1)))
            }
            _ => class_values[idx] = Some(gamma),
        }
        class_index.push(idx);
        center_rows.extend(parse_reals(&toks[2..], ln, WHAT)?);
    }
    let class_values: Vec<f64> = class_values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| format_err(format!("{WHAT}: class {} has no center", i + 1))))
        .collect::<Result<_>>()?;

    let mut center_of = Vec::with_capacity(n);
    let mut y_star = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut crops = Vec::with_capacity(n * d);
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        let (ln, toks) = lines.next_tokens()?;
        if toks.len() != d + 3 {
            return Err(format_err(format!("{WHAT}: line {ln}: crop needs {} fields", d + 3)));
        }
        let c = index_1based(toks[0], ln, WHAT, k)?;
        counts[c] += 1;
        center_of.push(c);
        y_star.push(parse_tok(toks[1], ln, WHAT)?);
        y.push(parse_tok(toks[2], ln, WHAT)?);
        crops.extend(parse_reals(&toks[3..], ln, WHAT)?);
    }
    lines.expect_end()?;

    let centers = CenterSet {
        centers: Matrix::from_vec(k, d, center_rows).map_err(|e| format_err(format!("{WHAT}: {e}")))?,
        class_values: class_values.clone(),
        class_index,
    };
    let data = CropDataset {
        crops: Matrix::from_vec(n, d, crops).map_err(|e| format_err(format!("{WHAT}: {e}")))?,
        center_of,
        y_star,
        y,
        counts,
        class_values,
        epsilon,
        rho,
    };
    data.check_invariants(&centers)
        .map_err(|e| format_err(format!("{WHAT}: {e}")))?;
    Ok(DatasetFile { centers, data, delta })
}

/// Header `k d activation`, then the `k` rows of `W`.
pub fn write_shallow_net(net: &ShallowNet) -> String {
    let mut out = format!("{}\n", net.describe());
    for row in net.weights().row_iter() {
        let mut line = String::new();
        push_reals(&mut line, row);
        out.push_str(line.trim_start());
        out.push('\n');
    }
    out
}

pub fn read_shallow_net(text: &str) -> Result<ShallowNet> {
    const WHAT: &str = "network checkpoint";
    let mut lines = Lines::new(text, WHAT);
    let (ln, head) = lines.next_tokens()?;
    if head.len() != 3 {
        return Err(format_err(format!("{WHAT}: header must be `k d activation`")));
    }
    let k: usize = parse_tok(head[0], ln, WHAT)?;
    let d: usize = parse_tok(head[1], ln, WHAT)?;
    let activation: Activation = head[2]
        .parse()
        .map_err(|_| format_err(format!("{WHAT}: unknown activation `{}`", head[2])))?;
    let mut w = Vec::with_capacity(k * d);
    for _ in 0..k {
        let (ln, toks) = lines.next_tokens()?;
        if toks.len() != d {
            return Err(format_err(format!("{WHAT}: line {ln}: expected {d} values")));
        }
        w.extend(parse_reals(&toks, ln, WHAT)?);
    }
    lines.expect_end()?;
    let weights = Matrix::from_vec(k, d, w).map_err(|e| format_err(format!("{WHAT}: {e}")))?;
    ShallowNet::from_weights(weights, activation).map_err(|e| format_err(format!("{WHAT}: {e}")))
}

/// Header `activation width_0 width_1 …`, then per layer its weight rows
/// followed by one bias line.
pub fn write_encoder(enc: &MlpEncoder) -> String {
    let widths: Vec<String> = enc.widths().iter().map(usize::to_string).collect();
    let mut out = format!("{} {}\n", enc.activation(), widths.join(" "));
    for layer in enc.layers() {
        for row in layer.weight.row_iter() {
            let mut line = String::new();
            push_reals(&mut line, row);
            out.push_str(line.trim_start());
            out.push('\n');
        }
        let mut line = String::new();
        push_reals(&mut line, &layer.bias);
        out.push_str(line.trim_start());
        out.push('\n');
    }
    out
}

pub fn read_encoder(text: &str) -> Result<MlpEncoder> {
    const WHAT: &str = "encoder checkpoint";
    let mut lines = Lines::new(text, WHAT);
    let (ln, head) = lines.next_tokens()?;
    if head.len() < 2 {
        return Err(format_err(format!("{WHAT}: header must list an activation and widths")));
    }
    let activation: Activation = head[0]
        .parse()
        .map_err(|_| format_err(format!("{WHAT}: unknown activation `{}`", head[0])))?;
    let widths: Vec<usize> = head[1..]
        .iter()
        .map(|t| parse_tok(t, ln, WHAT))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut w = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_out {
            let (ln, toks) = lines.next_tokens()?;
            if toks.len() != fan_in {
                return Err(format_err(format!("{WHAT}: line {ln}: expected {fan_in} weights")));
            }
            w.extend(parse_reals(&toks, ln, WHAT)?);
        }
        let (ln, toks) = lines.next_tokens()?;
        if toks.len() != fan_out {
            return Err(format_err(format!("{WHAT}: line {ln}: expected {fan_out} biases")));
        }
        layers.push(DenseLayer {
            weight: Matrix::from_vec(fan_out, fan_in, w).map_err(|e| format_err(format!("{WHAT}: {e}")))?,
            bias: parse_reals(&toks, ln, WHAT)?,
        });
    }
    lines.expect_end()?;
    MlpEncoder::from_layers(widths[0], layers, activation).map_err(|e| format_err(format!("{WHAT}: {e}")))
}
