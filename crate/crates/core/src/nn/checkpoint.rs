//! Text checkpoint format for [`Mlp`] parameters.
//!
//! ```text
//! sobolev-mlp 1
//! layers 2 256 256 1
//! activation relu            (leaky_relu carries its slope: `activation leaky_relu 0.01`)
//! head linear
//! tensor W0 2 256
//! <one line per row, values separated by single spaces>
//! tensor b0 1 256
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is bit-exact. Tensors appear in the order `W0, b0, W1, b1, ...`.

use std::io::{BufRead, Write};

use sobolev_autodiff::Tensor;

use super::mlp::{Activation, Mlp, MlpSpec};
use crate::error::{Error, Result};

const MAGIC: &str = "sobolev-mlp 1";

pub fn write_checkpoint<W: Write>(mlp: &Mlp, mut w: W) -> Result<()> {
    let spec = mlp.spec();
    writeln!(w, "{MAGIC}")?;
    let sizes: Vec<String> = spec.layer_sizes.iter().map(usize::to_string).collect();
    writeln!(w, "layers {}", sizes.join(" "))?;
    match spec.activation {
        Activation::LeakyRelu { slope } => writeln!(w, "activation leaky_relu {slope:e}")?,
        a => writeln!(w, "activation {a}")?,
    }
    writeln!(w, "head {}", spec.head)?;
    for (i, p) in mlp.params().iter().enumerate() {
        let name = if i % 2 == 0 { "W" } else { "b" };
        writeln!(w, "tensor {name}{} {} {}", i / 2, p.rows(), p.cols())?;
        for r in 0..p.rows() {
            let row: Vec<String> = p.row_slice(r).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint { line: self.line, reason: reason.into() }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(parts.map(str::to_owned).collect())
    }
}

fn parse_usize(lines: &Lines<impl BufRead>, s: &str) -> Result<usize> {
    s.parse().map_err(|_| lines.err(format!("bad integer `{s}`")))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Mlp> {
    let mut lines = Lines { inner: r.lines(), line: 0 };
    if lines.next()?.trim() != MAGIC {
        return Err(lines.err("missing `sobolev-mlp 1` header"));
    }
    let sizes = lines
        .keyed("layers")?
        .iter()
        .map(|s| parse_usize(&lines, s))
        .collect::<Result<Vec<_>>>()?;
    let act = lines.keyed("activation")?;
    let activation = match act.as_slice() {
        [name, slope] if name == "leaky_relu" => Activation::LeakyRelu {
            slope: slope.parse().map_err(|_| lines.err(format!("bad slope `{slope}`")))?,
        },
        [name] => name.parse().map_err(|e: Error| lines.err(e.to_string()))?,
        _ => return Err(lines.err("malformed activation line")),
    };
    let head = match lines.keyed("head")?.as_slice() {
        [h] => h.parse().map_err(|e: Error| lines.err(e.to_string()))?,
        _ => return Err(lines.err("malformed head line")),
    };
    let spec = MlpSpec::new(sizes, activation, head);
    spec.validate().map_err(|e| lines.err(e.to_string()))?;

    let mut params = Vec::with_capacity(2 * spec.num_layers());
    for i in 0..2 * spec.num_layers() {
        let hdr = lines.keyed("tensor")?;
        let expected_name = format!("{}{}", if i % 2 == 0 { "W" } else { "b" }, i / 2);
        let [name, rows, cols] = hdr.as_slice() else {
            return Err(lines.err("malformed tensor header"));
        };
        if *name != expected_name {
            return Err(lines.err(format!("expected tensor {expected_name}, found {name}")));
        }
        let (rows, cols) = (parse_usize(&lines, rows)?, parse_usize(&lines, cols)?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let l = lines.next()?;
            let before = data.len();
            for tok in l.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| lines.err(format!("bad number `{tok}`")))?);
            }
            if data.len() - before != cols {
                return Err(lines.err(format!("expected {cols} values in row")));
            }
        }
        params.push(Tensor::new(rows, cols, data)?);
    }
    if lines.next()?.trim() != "end" {
        return Err(lines.err("expected `end`"));
    }
    Mlp::from_params(spec, params).map_err(|e| lines.err(e.to_string()))
}
