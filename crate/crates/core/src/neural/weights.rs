//! Versioned plain-text weight format.
//!
//! ```text
//! carsac-weights 1
//! leaky_relu_slope 1e-2
//! alpha 1e0
//! layer init_state.0 128 16 leaky_relu
//! w <16 values>          (one line per output row, 128 lines)
//! b <128 values>
//! layer init_state.1 128 128 none
//! ...
//! end
//! ```
//!
//! Layers appear in the order init_state, inlier_decoder, mlp1, mlp2, mlp3,
//! each MLP's layers in forward order. A layer header gives `name out in
//! activation`. Values use the shortest round-trip exponent notation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::{DMatrix, DVector};

use super::layer::{Activation, LinearLayer, LEAKY_RELU_SLOPE};
use super::MlpBundle;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &str = "carsac-weights";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn save_weights(bundle: &MlpBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{WEIGHTS_MAGIC} {WEIGHTS_VERSION}");
    let _ = writeln!(out, "leaky_relu_slope {:e}", LEAKY_RELU_SLOPE);
    let _ = writeln!(out, "alpha {:e}", bundle.alpha);
    for (name, mlp) in bundle.mlps() {
        for (i, layer) in mlp.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "layer {name}.{i} {} {} {}",
                layer.outputs(),
                layer.inputs(),
                layer.activation.tag()
            );
            for r in 0..layer.outputs() {
                out.push('w');
                for c in 0..layer.inputs() {
                    let _ = write!(out, " {:e}", layer.w[(r, c)]);
                }
                out.push('\n');
            }
            out.push('b');
            for v in layer.b.iter() {
                let _ = write!(out, " {:e}", v);
            }
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: core::iter::Enumerate<core::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Weights(format!("truncated file: expected {what}")))
    }
}

fn parse_values(line: &str, lineno: usize, tag: &str, count: usize, layer: &str) -> Result<Vec<f64>> {
    let mut it = line.split_ascii_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::Weights(format!(
            "line {lineno}: expected '{tag}' row for layer {layer}"
        )));
    }
    let vals = it
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Weights(format!("line {lineno}: invalid number '{t}' in layer {layer}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != count {
        return Err(Error::Weights(format!(
            "line {lineno}: shape mismatch in layer {layer}: expected {count} values, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn parse_scalar(line: (usize, &str), key: &str) -> Result<f64> {
    let (lineno, text) = line;
    let mut it = text.split_ascii_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(k), Some(v), None) if k == key => v
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Weights(format!("line {lineno}: invalid {key}"))),
        _ => Err(Error::Weights(format!("line {lineno}: expected '{key} <value>'"))),
    }
}

/// Parses a weight file. The expected architecture is that of
/// [`MlpBundle::new_random`]; any deviation is reported with the layer name.
pub fn load_weights(text: &str) -> Result<MlpBundle> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (lineno, header) = lines.next("header")?;
    let mut it = header.split_ascii_whitespace();
    if it.next() != Some(WEIGHTS_MAGIC) {
        return Err(Error::Weights(format!("line {lineno}: not a weight file")));
    }
    match it.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(WEIGHTS_VERSION) => {}
        Some(v) => {
            return Err(Error::Weights(format!(
                "unsupported version {v} (expected {WEIGHTS_VERSION})"
            )))
        }
        None => return Err(Error::Weights(format!("line {lineno}: missing version"))),
    }
    let slope = parse_scalar(lines.next("leaky_relu_slope")?, "leaky_relu_slope")?;
    if slope != LEAKY_RELU_SLOPE {
        return Err(Error::Weights(format!(
            "leaky_relu_slope {slope} differs from the built-in {LEAKY_RELU_SLOPE}"
        )));
    }
    let alpha = parse_scalar(lines.next("alpha")?, "alpha")?;
    if !(alpha > 0.0) {
        return Err(Error::Weights("alpha must be positive".to_string()));
    }

    let mut bundle = MlpBundle::new_random(0);
    bundle.alpha = alpha;
    for (name, mlp) in bundle.mlps_mut() {
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let full = format!("{name}.{i}");
            let (lineno, head) = lines.next(&format!("layer {full}"))?;
            let parts: Vec<&str> = head.split_ascii_whitespace().collect();
            if parts.len() != 5 || parts[0] != "layer" {
                return Err(Error::Weights(format!("line {lineno}: expected header for layer {full}")));
            }
            if parts[1] != full {
                return Err(Error::Weights(format!(
                    "line {lineno}: expected layer {full}, found {}",
                    parts[1]
                )));
            }
            let out: usize = parts[2]
                .parse()
                .map_err(|_| Error::Weights(format!("line {lineno}: bad shape for layer {full}")))?;
            let inp: usize = parts[3]
                .parse()
                .map_err(|_| Error::Weights(format!("line {lineno}: bad shape for layer {full}")))?;
            if out != layer.outputs() || inp != layer.inputs() {
                return Err(Error::Weights(format!(
                    "shape mismatch in layer {full}: file has {out}x{inp}, expected {}x{}",
                    layer.outputs(),
                    layer.inputs()
                )));
            }
            let act = Activation::from_tag(parts[4])
                .ok_or_else(|| Error::Weights(format!("line {lineno}: unknown activation in layer {full}")))?;
            if act != layer.activation {
                return Err(Error::Weights(format!(
                    "activation mismatch in layer {full}: file has {}, expected {}",
                    act.tag(),
                    layer.activation.tag()
                )));
            }
            let mut w = DMatrix::zeros(out, inp);
            for r in 0..out {
                let (ln, row) = lines.next(&format!("weights of layer {full}"))?;
                let vals = parse_values(row, ln, "w", inp, &full)?;
                for (c, v) in vals.into_iter().enumerate() {
                    w[(r, c)] = v;
                }
            }
            let (ln, row) = lines.next(&format!("bias of layer {full}"))?;
            let b = DVector::from_vec(parse_values(row, ln, "b", out, &full)?);
            *layer = LinearLayer {
                w,
                b,
                activation: act,
            };
        }
    }
    let (lineno, end) = lines.next("end")?;
    if end != "end" {
        return Err(Error::Weights(format!("line {lineno}: expected 'end'")));
    }
    Ok(bundle)
}
