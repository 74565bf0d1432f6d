//! Plain-text checkpoint format.
//!
//! ```text
//! schedsamp-checkpoint 1
//! vocab_size 11
//! embed_dim 8
//! hidden_dim 12
//! mode static
//! input_dim 11
//! init_scale 8.0000000000000002e-2
//! seed 42
//! tensor embeddings 11 8
//! <one line per row, 17 significant digits per value>
//! ...
//! end
//! ```
//!
//! Every value is written with 17 significant digits, which round-trips an
//! `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{InputMode, ModelConfig, ModelParams, SeqModel, TENSOR_NAMES};

const MAGIC: &str = "schedsamp-checkpoint";
const VERSION: u32 = 1;

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn to_string(model: &SeqModel) -> String {
    let c = &model.config;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "vocab_size {}", c.vocab_size);
    let _ = writeln!(out, "embed_dim {}", c.embed_dim);
    let _ = writeln!(out, "hidden_dim {}", c.hidden_dim);
    let _ = writeln!(out, "mode {}", c.mode.as_str());
    let _ = writeln!(out, "input_dim {}", c.input_dim);
    let _ = writeln!(out, "init_scale {}", fmt_f64(c.init_scale));
    let _ = writeln!(out, "seed {}", c.seed);
    for (name, (rows, cols), data) in model.params.tensors() {
        let _ = writeln!(out, "tensor {name} {rows} {cols}");
        for row in data.chunks(cols.max(1)) {
            let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(self.err("unexpected end of checkpoint")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.last,
            msg: msg.into(),
        }
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => Err(self.err(format!("expected field `{key}`"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| self.err(format!("bad value for `{key}`: {v}")))
    }
}

pub fn from_str(text: &str) -> Result<SeqModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let version: u32 = lines.parsed(MAGIC)?;
    if version != VERSION {
        return Err(lines.err(format!("unsupported checkpoint version {version}")));
    }
    let vocab_size = lines.parsed("vocab_size")?;
    let embed_dim = lines.parsed("embed_dim")?;
    let hidden_dim = lines.parsed("hidden_dim")?;
    let mode = match lines.field("mode")? {
        "static" => InputMode::Static,
        "aligned" => InputMode::Aligned,
        other => return Err(lines.err(format!("unknown mode {other}"))),
    };
    let input_dim = lines.parsed("input_dim")?;
    let init_scale = lines.parsed("init_scale")?;
    let seed = lines.parsed("seed")?;
    let config = ModelConfig {
        vocab_size,
        embed_dim,
        hidden_dim,
        mode,
        input_dim,
        init_scale,
        seed,
    };
    config.validate()?;
    let mut params = ModelParams::zeros(&config);
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.1).collect();
    for (k, dst) in params.tensors_mut().into_iter().enumerate() {
        let header = lines.next()?;
        let expect = format!("tensor {} {} {}", TENSOR_NAMES[k], shapes[k].0, shapes[k].1);
        if header.trim() != expect {
            return Err(lines.err(format!("expected `{expect}`, found `{header}`")));
        }
        let (rows, cols) = shapes[k];
        for r in 0..rows {
            let line = lines.next()?;
            let vals: Vec<f64> = line
                .split_ascii_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| lines.err(format!("bad number: {e}")))?;
            if vals.len() != cols {
                return Err(lines.err(format!("expected {cols} values, found {}", vals.len())));
            }
            dst[r * cols..(r + 1) * cols].copy_from_slice(&vals);
        }
    }
    if lines.next()?.trim() != "end" {
        return Err(lines.err("missing `end` marker"));
    }
    if !params.all_finite() {
        return Err(Error::config("checkpoint contains non-finite values"));
    }
    Ok(SeqModel { config, params })
}

pub fn save(model: &SeqModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SeqModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(mode: InputMode, seed: u64, scale: f64) -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            embed_dim: 3,
            hidden_dim: 5,
            mode,
            input_dim: 4,
            init_scale: scale,
            seed,
        }
    }

    fn bits(m: &SeqModel) -> Vec<u64> {
        m.params
            .tensors()
            .iter()
            .flat_map(|t| t.2.iter().map(|x| x.to_bits()))
            .collect()
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), scale in 1e-6f64..10.0, aligned in any::<bool>()) {
            let mode = if aligned { InputMode::Aligned } else { InputMode::Static };
            let m = SeqModel::new(cfg(mode, seed, scale)).unwrap();
            let back = from_str(&to_string(&m)).unwrap();
            prop_assert_eq!(&back.config, &m.config);
            prop_assert_eq!(bits(&back), bits(&m));
        }
    }

    #[test]
    fn extreme_values_round_trip() {
        let mut m = SeqModel::zeros(cfg(InputMode::Static, 1, 0.1)).unwrap();
        m.params.out_bias = vec![
            f64::MIN_POSITIVE,
            -0.0,
            1e300,
            -1e-300,
            0.1,
            1.0 / 3.0,
            5e-324,
        ];
        let back = from_str(&to_string(&m)).unwrap();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn rejects_corruption() {
        let m = SeqModel::new(cfg(InputMode::Static, 1, 0.1)).unwrap();
        let text = to_string(&m);
        assert!(
            from_str(&text.replace("schedsamp-checkpoint 1", "schedsamp-checkpoint 2")).is_err()
        );
        assert!(from_str(&text.replace("tensor w_hidden", "tensor w_hid")).is_err());
        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(matches!(from_str(&truncated), Err(Error::Parse { .. })));
    }
}
