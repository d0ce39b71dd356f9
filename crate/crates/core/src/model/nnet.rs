//! Reader and writer for the plain-text NNet interchange format.
//!
//! Layout after the leading `//` comment lines:
//!
//! ```text
//! numLayers, inputSize, outputSize, maxLayerSize,
//! size0, size1, ..., sizeN,
//! 0,                                  (unused flag)
//! input minimums (inputSize values)
//! input maximums (inputSize values)
//! means  (inputSize + 1 values, the last one for outputs)
//! ranges (inputSize + 1 values, the last one for outputs)
//! per layer: one line per weight row, then one line per bias entry
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Activation, Layer, Network, Normalization};
use crate::error::{Error, Result};

struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let mut lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let header = lines
            .iter()
            .take_while(|(_, l)| l.starts_with("//"))
            .count();
        lines.drain(..header);
        Self { lines, pos: 0 }
    }

    fn last_line(&self) -> usize {
        self.lines.last().map_or(0, |(n, _)| *n)
    }

    fn next_numbers(&mut self, expected: Option<usize>, what: &str) -> Result<(usize, Vec<f64>)> {
        let (line, text) = *self.lines.get(self.pos).ok_or_else(|| Error::NNetParse {
            line: self.last_line() + 1,
            msg: format!("unexpected end of file while reading {what}"),
        })?;
        self.pos += 1;
        let values = text
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::NNetParse {
                    line,
                    msg: format!("non-numeric token {t:?} in {what}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(n) = expected {
            if values.len() != n {
                return Err(Error::NNetParse {
                    line,
                    msg: format!("{what}: expected {n} values, found {}", values.len()),
                });
            }
        }
        Ok((line, values))
    }
}

fn as_count(v: f64, line: usize, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::NNetParse {
            line,
            msg: format!("{what} must be a non-negative integer, got {v}"),
        });
    }
    Ok(v as usize)
}

pub fn parse_nnet(text: &str) -> Result<Network> {
    let mut lines = Lines::new(text);

    let (line, header) = lines.next_numbers(None, "header counts")?;
    if header.len() < 3 {
        return Err(Error::NNetParse {
            line,
            msg: "header needs numLayers, inputSize, outputSize".into(),
        });
    }
    let num_layers = as_count(header[0], line, "numLayers")?;
    let input_size = as_count(header[1], line, "inputSize")?;
    let output_size = as_count(header[2], line, "outputSize")?;
    if num_layers == 0 || input_size == 0 || output_size == 0 {
        return Err(Error::NNetParse {
            line,
            msg: "counts must be positive".into(),
        });
    }

    let (line, sizes) = lines.next_numbers(Some(num_layers + 1), "layer sizes")?;
    let sizes = sizes
        .into_iter()
        .map(|v| as_count(v, line, "layer size"))
        .collect::<Result<Vec<_>>>()?;
    if sizes[0] != input_size || sizes[num_layers] != output_size {
        return Err(Error::NNetParse {
            line,
            msg: format!(
                "layer sizes {sizes:?} disagree with inputSize {input_size} / outputSize {output_size}"
            ),
        });
    }

    lines.next_numbers(None, "flag line")?;
    let (_, input_min) = lines.next_numbers(Some(input_size), "input minimums")?;
    let (_, input_max) = lines.next_numbers(Some(input_size), "input maximums")?;
    let (_, means) = lines.next_numbers(Some(input_size + 1), "means")?;
    let (_, ranges) = lines.next_numbers(Some(input_size + 1), "ranges")?;

    let mut layers = Vec::with_capacity(num_layers);
    for k in 0..num_layers {
        let (rows, cols) = (sizes[k + 1], sizes[k]);
        let mut w = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let (_, row) = lines.next_numbers(Some(cols), "weight row")?;
            for (c, v) in row.into_iter().enumerate() {
                w[(r, c)] = v;
            }
        }
        let mut b = DVector::zeros(rows);
        for r in 0..rows {
            let (_, v) = lines.next_numbers(Some(1), "bias")?;
            b[r] = v[0];
        }
        let act = if k + 1 == num_layers {
            Activation::Identity
        } else {
            Activation::Relu
        };
        layers.push(Layer::new(w, b, act)?);
    }
    if let Some(&(line, _)) = lines.lines.get(lines.pos) {
        return Err(Error::NNetParse {
            line,
            msg: "trailing data after last layer".into(),
        });
    }

    Network::with_normalization(
        layers,
        Normalization {
            input_min,
            input_max,
            means,
            ranges,
        },
    )
}

pub fn load_nnet(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_nnet(&text)
}

/// Serializes a network. Values use Rust's shortest round-trip formatting,
/// so reloading reproduces every weight bit-for-bit.
pub trait NNetText {
    fn to_nnet_string(&self) -> String;
}

impl NNetText for Network {
    fn to_nnet_string(&self) -> String {
        let mut out = String::new();
        let sizes: Vec<usize> = std::iter::once(self.input_dim())
            .chain(self.layers().iter().map(Layer::output_dim))
            .collect();
        let max = sizes.iter().copied().max().unwrap_or(0);
        let join = |vals: &mut dyn Iterator<Item = String>| {
            let mut s = vals.collect::<Vec<_>>().join(",");
            s.push(',');
            s
        };
        let norm = self.normalization();
        let _ = writeln!(out, "// Neural network in NNet format, written by nnrepair");
        let _ = writeln!(
            out,
            "{},{},{},{},",
            self.num_layers(),
            self.input_dim(),
            self.output_dim(),
            max
        );
        let _ = writeln!(out, "{}", join(&mut sizes.iter().map(|s| s.to_string())));
        let _ = writeln!(out, "0,");
        for vals in [&norm.input_min, &norm.input_max, &norm.means, &norm.ranges] {
            let _ = writeln!(out, "{}", join(&mut vals.iter().map(|v| format!("{v:?}"))));
        }
        for layer in self.layers() {
            for r in 0..layer.output_dim() {
                let _ = writeln!(
                    out,
                    "{}",
                    join(&mut layer.weights.row(r).iter().map(|v| format!("{v:?}")))
                );
            }
            for v in layer.bias.iter() {
                let _ = writeln!(out, "{v:?},");
            }
        }
        out
    }
}

pub fn write_nnet(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, net.to_nnet_string()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
