//! Plain-text model files.
//!
//! ```text
//! <kind> <arg> <arg> ...
//! <rows> <cols>                 # one block per dense layer
//! <cols weights>                # repeated `rows` times, row-major
//! <rows biases>
//! <key> <value> <value> ...     # trailing keyed lines, order preserved
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! parse of a rendered file reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelText {
    pub kind: String,
    pub args: Vec<String>,
    pub layers: Vec<Dense<f64>>,
    pub entries: Vec<(String, Vec<String>)>,
}

impl ModelText {
    pub fn new(kind: &str, args: &[String]) -> Self {
        ModelText {
            kind: kind.to_string(),
            args: args.to_vec(),
            ..Default::default()
        }
    }

    pub fn push_layer<T: Scalar>(&mut self, layer: &Dense<T>) {
        self.layers.push(Dense {
            rows: layer.rows,
            cols: layer.cols,
            weights: layer.weights.iter().map(|v| v.as_f64()).collect(),
            bias: layer.bias.iter().map(|v| v.as_f64()).collect(),
        });
    }

    pub fn push_entry(&mut self, key: &str, values: Vec<String>) {
        self.entries.push((key.to_string(), values));
    }

    pub fn push_values<T: Scalar>(&mut self, key: &str, values: &[T]) {
        self.push_entry(key, values.iter().map(|v| v.to_string()).collect());
    }

    pub fn layers_as<T: Scalar>(&self) -> Vec<Dense<T>> {
        self.layers
            .iter()
            .map(|l| Dense {
                rows: l.rows,
                cols: l.cols,
                weights: l.weights.iter().map(|v| T::lit(*v)).collect(),
                bias: l.bias.iter().map(|v| T::lit(*v)).collect(),
            })
            .collect()
    }

    pub fn entries_named<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a [String]> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn entry(&self, key: &str) -> Option<&[String]> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }

    pub fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.entry(key).map(|v| parse_floats(v, key)).transpose()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.kind);
        for a in &self.args {
            out.push(' ');
            out.push_str(a);
        }
        out.push('\n');
        for l in &self.layers {
            let _ = writeln!(out, "{} {}", l.rows, l.cols);
            for row in l.weights.chunks(l.cols.max(1)) {
                push_joined(&mut out, row);
            }
            push_joined(&mut out, &l.bias);
        }
        for (k, vals) in &self.entries {
            out.push_str(k);
            for v in vals {
                out.push(' ');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let mut i = 0;
        let next_line = |i: &mut usize| -> Option<(usize, &str)> {
            while *i < lines.len() {
                let l = lines[*i].trim();
                *i += 1;
                if !l.is_empty() {
                    return Some((*i, l));
                }
            }
            None
        };
        let (_, head) = next_line(&mut i).ok_or_else(|| Error::parse(1, "empty model file"))?;
        let mut toks = head.split_whitespace();
        let kind = toks.next().unwrap_or_default().to_string();
        let args = toks.map(str::to_string).collect();
        let mut model = ModelText {
            kind,
            args,
            ..Default::default()
        };
        while let Some((ln, line)) = next_line(&mut i) {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let dims = if toks.len() == 2 {
                toks[0].parse::<usize>().ok().zip(toks[1].parse::<usize>().ok())
            } else {
                None
            };
            match dims {
                Some((rows, cols)) => {
                    if !model.entries.is_empty() {
                        return Err(Error::parse(ln, "layer block after keyed entries"));
                    }
                    let mut weights = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (ln, l) = next_line(&mut i)
                            .ok_or_else(|| Error::parse(ln, "truncated layer block"))?;
                        let row = parse_line(l, ln)?;
                        if row.len() != cols {
                            return Err(Error::parse(ln, format!("expected {cols} weights")));
                        }
                        weights.extend(row);
                    }
                    let (bln, l) =
                        next_line(&mut i).ok_or_else(|| Error::parse(ln, "missing bias line"))?;
                    let bias = parse_line(l, bln)?;
                    if bias.len() != rows {
                        return Err(Error::parse(bln, format!("expected {rows} biases")));
                    }
                    model.layers.push(Dense {
                        rows,
                        cols,
                        weights,
                        bias,
                    });
                }
                None => {
                    let key = toks[0].to_string();
                    model
                        .entries
                        .push((key, toks[1..].iter().map(|s| s.to_string()).collect()));
                }
            }
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::parse(1, format!("expected `{kind}` model, found `{}`", self.kind)));
        }
        Ok(())
    }
}

fn push_joined(out: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn parse_line(line: &str, ln: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(ln, format!("bad number `{t}`")))
        })
        .collect()
}

pub fn parse_floats(values: &[String], key: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::param(format!("`{key}`: bad number `{t}`")))
        })
        .collect()
}

pub fn parse_arg<V: std::str::FromStr>(args: &[String], idx: usize, what: &str) -> Result<V> {
    args.get(idx)
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| Error::parse(1, format!("missing or invalid {what}")))
}
