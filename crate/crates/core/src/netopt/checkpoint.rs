//! Plain-text checkpoints.
//!
//! ```text
//! version=1
//! layer_sizes=11,32,32,8
//! activation=tanh
//! feature_layer=1
//! W1
//! <row 0 of W1, space separated>
//! ...
//! b1
//! <b1, space separated>
//! W2
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every f64.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::mlp::{Activation, Layer, VelocityNet};

pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_row(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:.16e}").unwrap();
    }
    out.push('\n');
}

pub fn to_checkpoint_string(net: &VelocityNet) -> String {
    let mut out = String::new();
    writeln!(out, "version={CHECKPOINT_VERSION}").unwrap();
    let sizes: Vec<String> = net.layer_sizes().iter().map(|s| s.to_string()).collect();
    writeln!(out, "layer_sizes={}", sizes.join(",")).unwrap();
    writeln!(out, "activation={}", net.activation()).unwrap();
    writeln!(out, "feature_layer={}", net.feature_layer()).unwrap();
    for (k, layer) in net.layers().iter().enumerate() {
        writeln!(out, "W{}", k + 1).unwrap();
        for r in layer.weight.iter_rows() {
            fmt_row(&mut out, r);
        }
        writeln!(out, "b{}", k + 1).unwrap();
        fmt_row(&mut out, &layer.bias);
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, expect: &str) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(Error::Parse {
                line: self.last + 1,
                message: format!("unexpected end of file, expected {expect}"),
            }),
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.last,
            message: message.into(),
        }
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line(key)?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| self.err(format!("expected `{key}=...`, found `{line}`")))
    }

    fn values(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let line = self.next_line(what)?;
        let vals = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.err(format!("bad number in {what}: {e}")))?;
        if vals.len() != n {
            return Err(self.err(format!("{what} has {} values, expected {n}", vals.len())));
        }
        Ok(vals)
    }
}

pub fn from_checkpoint_str(text: &str) -> Result<VelocityNet> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let version = lines.field("version")?;
    if version.trim() != CHECKPOINT_VERSION.to_string() {
        return Err(lines.err(format!("unsupported checkpoint version `{version}`")));
    }
    let sizes = lines
        .field("layer_sizes")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| lines.err(format!("bad layer_sizes: {e}")))?;
    if sizes.len() < 2 {
        return Err(lines.err("layer_sizes needs at least two entries"));
    }
    let activation: Activation = lines.field("activation")?.parse().map_err(|e: Error| lines.err(e.to_string()))?;
    let feature_layer = lines
        .field("feature_layer")?
        .trim()
        .parse::<usize>()
        .map_err(|e| lines.err(format!("bad feature_layer: {e}")))?;
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for (k, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let tag = format!("W{}", k + 1);
        let header = lines.next_line(&tag)?;
        if header.trim() != tag {
            return Err(lines.err(format!("expected `{tag}`, found `{header}`")));
        }
        let mut data = Vec::with_capacity(fan_in * fan_out);
        for r in 0..fan_out {
            data.extend(lines.values(fan_in, &format!("row {r} of {tag}"))?);
        }
        let tag = format!("b{}", k + 1);
        let header = lines.next_line(&tag)?;
        if header.trim() != tag {
            return Err(lines.err(format!("expected `{tag}`, found `{header}`")));
        }
        let bias = lines.values(fan_out, &tag)?;
        layers.push(Layer {
            weight: Matrix::from_vec(fan_out, fan_in, data)?,
            bias,
        });
    }
    if let Some((i, extra)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: i + 1,
            message: format!("trailing content `{extra}`"),
        });
    }
    VelocityNet::from_layers(layers, activation, feature_layer).map_err(|e| Error::Parse {
        line: 4,
        message: e.to_string(),
    })
}

pub fn save_checkpoint(net: &VelocityNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_checkpoint_string(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VelocityNet> {
    from_checkpoint_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> VelocityNet {
        VelocityNet::new(&[5, 6, 4, 2], Activation::Tanh, 2, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut n = net();
        // include awkward values
        let mut p = n.params();
        p[0] = 1.0 / 3.0;
        p[1] = -0.0;
        p[2] = 1e-300;
        n.set_params(&p).unwrap();
        let text = to_checkpoint_string(&n);
        let back = from_checkpoint_str(&text).unwrap();
        let bits = |v: &VelocityNet| v.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&n));
        assert_eq!(to_checkpoint_string(&back), text);
        assert_eq!(back.velocity(&[0.1, 0.2], 0.3).unwrap(), n.velocity(&[0.1, 0.2], 0.3).unwrap());
    }

    #[test]
    fn rejects_other_versions() {
        let text = to_checkpoint_string(&net()).replacen("version=1", "version=2", 1);
        assert!(matches!(from_checkpoint_str(&text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = to_checkpoint_string(&net());
        let lines: Vec<&str> = text.lines().collect();
        for cut in [1, 4, 6, lines.len() - 1] {
            let truncated = lines[..cut].join("\n");
            match from_checkpoint_str(&truncated) {
                Err(Error::Parse { line, .. }) => assert!(line >= 1 && line <= cut + 1),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let short_row = text.replacen(" ", "", 1);
        assert!(matches!(from_checkpoint_str(&short_row), Err(Error::Parse { line: 6, .. })));
    }
}
