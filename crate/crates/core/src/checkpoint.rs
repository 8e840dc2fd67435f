//! Named-parameter serialization.
//!
//! Text format, version 1:
//!
//! ```text
//! ion-checkpoint v1
//! params <count>
//! <name> <ndims> <dim0> <dim1> ...
//! <value> <value> ...
//! ```
//!
//! One header line and one value line per tensor, in insertion order.
//! Values use Rust's shortest round-trip float formatting, so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const MAGIC: &str = "ion-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} v{VERSION}")?;
        writeln!(w, "params {}", self.tensors.len())?;
        let mut line = String::new();
        for t in &self.tensors {
            line.clear();
            write!(line, "{} {}", t.name, t.shape.len()).unwrap();
            for d in &t.shape {
                write!(line, " {d}").unwrap();
            }
            writeln!(w, "{line}")?;
            line.clear();
            for (i, v) in t.values.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(Error::Checkpoint(format!("unexpected end of file, expected {what}"))),
            }
        };
        let (ln, header) = next("header")?;
        let expected = format!("{MAGIC} v{VERSION}");
        if header.trim() != expected {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected `{expected}`, found `{}`", header.trim()),
            });
        }
        let (ln, count_line) = next("param count")?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: ln,
                msg: "expected `params <count>`".into(),
            })?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let (ln, head) = next("tensor header")?;
            let mut parts = head.split_whitespace();
            let bad = |msg: &str| Error::Parse {
                line: ln,
                msg: msg.to_string(),
            };
            let name = parts.next().ok_or_else(|| bad("missing tensor name"))?.to_string();
            let ndims: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad dimension count"))?;
            let shape: Vec<usize> = parts
                .map(|s| s.parse().map_err(|_| bad("bad dimension")))
                .collect::<Result<_>>()?;
            if shape.len() != ndims {
                return Err(bad("dimension count does not match dims"));
            }
            let (ln, body) = next("tensor values")?;
            let values: Vec<f64> = body
                .split_whitespace()
                .map(|s| {
                    s.parse().map_err(|_| Error::Parse {
                        line: ln,
                        msg: format!("bad value `{s}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("{} values for shape {:?}", values.len(), shape),
                });
            }
            ckpt.push(name, shape, values);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut c = Checkpoint::default();
            c.push("layer.weight", vec![values.len()], values.clone());
            c.push("layer.bias", vec![1, 1], vec![-0.0]);
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back.tensors.len(), 2);
            for (a, b) in back.tensors[0].values.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.tensors[1].values[0].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let text = "ion-checkpoint v2\nparams 0\n";
        assert!(matches!(Checkpoint::read_from(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn value_count_checked() {
        let text = "ion-checkpoint v1\nparams 1\nw 2 2 2\n1 2 3\n";
        assert!(matches!(Checkpoint::read_from(text.as_bytes()), Err(Error::Parse { line: 4, .. })));
    }
}
