//! Plain-text checkpoints.
//!
//! ```text
//! mlp-v1 S=30 T=144 dims=128,256,128,4
//! fc1.weight 183 128
//! <one line per row, space separated, 17 significant digits>
//! fc1.bias 128
//! <one line>
//! ...
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::MlpModel;
use crate::data::FeatureEncoder;
use crate::error::{Error, Result};

const MAGIC: &str = "mlp-v1";

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn tensor_names() -> Vec<String> {
    let mut names = Vec::new();
    for k in 1..=4 {
        if k > 1 {
            for part in ["scale", "shift", "running_mean", "running_var"] {
                names.push(format!("bn{k}.{part}"));
            }
        }
        names.push(format!("fc{k}.weight"));
        names.push(format!("fc{k}.bias"));
    }
    names
}

pub fn write_checkpoint(model: &MlpModel, encoder: &FeatureEncoder, mut out: impl Write) -> Result<()> {
    if encoder.width() != model.input_width() {
        return Err(Error::Shape(format!(
            "encoder width {} != model input width {}",
            encoder.width(),
            model.input_width()
        )));
    }
    let dims: Vec<String> = model.widths().iter().map(usize::to_string).collect();
    writeln!(out, "{MAGIC} S={} T={} dims={}", encoder.n_stations, encoder.n_slots, dims.join(","))?;
    let write_vec = |out: &mut dyn Write, name: &str, v: &Array1<f64>| -> std::io::Result<()> {
        writeln!(out, "{name} {}", v.len())?;
        let vals: Vec<String> = v.iter().map(|&x| fmt(x)).collect();
        writeln!(out, "{}", vals.join(" "))
    };
    for k in 0..4 {
        if k > 0 {
            let n = &model.norms[k - 1];
            write_vec(&mut out, &format!("bn{}.scale", k + 1), &n.scale)?;
            write_vec(&mut out, &format!("bn{}.shift", k + 1), &n.shift)?;
            write_vec(&mut out, &format!("bn{}.running_mean", k + 1), &n.running_mean)?;
            write_vec(&mut out, &format!("bn{}.running_var", k + 1), &n.running_var)?;
        }
        let l = &model.layers[k];
        writeln!(out, "fc{}.weight {} {}", k + 1, l.weight.nrows(), l.weight.ncols())?;
        for row in l.weight.rows() {
            let vals: Vec<String> = row.iter().map(|&x| fmt(x)).collect();
            writeln!(out, "{}", vals.join(" "))?;
        }
        write_vec(&mut out, &format!("fc{}.bias", k + 1), &l.bias)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &MlpModel, encoder: &FeatureEncoder, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, encoder, &mut buf)?;
    crate::bench::report::write_atomic(path, &buf)
}

fn parse_values(line: &str, expected: usize, name: &str) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| Error::Data(format!("checkpoint tensor {name}: {e}")))?;
    if vals.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint tensor {name}: expected {expected} values, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

pub fn read_checkpoint(input: impl BufRead) -> Result<(MlpModel, FeatureEncoder)> {
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))?
            .map_err(Error::from)
    };
    let header = next()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Data(format!("not a {MAGIC} checkpoint")));
    }
    let mut s = None;
    let mut t = None;
    let mut dims = None;
    for p in parts {
        let bad = || Error::Data(format!("bad checkpoint header field {p}"));
        if let Some(v) = p.strip_prefix("S=") {
            s = Some(v.parse::<usize>().map_err(|_| bad())?);
        } else if let Some(v) = p.strip_prefix("T=") {
            t = Some(v.parse::<usize>().map_err(|_| bad())?);
        } else if let Some(v) = p.strip_prefix("dims=") {
            let d: std::result::Result<Vec<usize>, _> = v.split(',').map(str::parse).collect();
            dims = Some(d.map_err(|_| bad())?);
        }
    }
    let (s, t, dims) = match (s, t, dims) {
        (Some(s), Some(t), Some(d)) if d.len() == 4 => (s, t, d),
        _ => return Err(Error::Data("checkpoint header needs S=, T= and four dims".into())),
    };
    let encoder = FeatureEncoder::new(s, t);
    let mut model = MlpModel::zeros(encoder.width(), [dims[0], dims[1], dims[2]], dims[3]);
    for name in tensor_names() {
        let head = next()?;
        let mut hp = head.split_whitespace();
        if hp.next() != Some(name.as_str()) {
            return Err(Error::Data(format!("expected tensor {name}, found `{head}`")));
        }
        let shape: std::result::Result<Vec<usize>, _> = hp.map(str::parse).collect();
        let shape = shape.map_err(|_| Error::Data(format!("bad shape for {name}")))?;
        let (kind, part) = name.split_once('.').expect("dotted name");
        let k: usize = kind[2..].parse().expect("digit suffix");
        if kind.starts_with("fc") && part == "weight" {
            let layer = &mut model.layers[k - 1];
            if shape != [layer.weight.nrows(), layer.weight.ncols()] {
                return Err(Error::Shape(format!(
                    "{name} has shape {shape:?}, expected {:?}",
                    layer.weight.dim()
                )));
            }
            let cols = layer.weight.ncols();
            let mut flat = Vec::with_capacity(layer.weight.len());
            for _ in 0..layer.weight.nrows() {
                flat.extend(parse_values(&next()?, cols, &name)?);
            }
            layer.weight = Array2::from_shape_vec(layer.weight.dim(), flat).expect("sized");
        } else {
            let target: &mut Array1<f64> = if kind.starts_with("fc") {
                &mut model.layers[k - 1].bias
            } else {
                let n = &mut model.norms[k - 2];
                match part {
                    "scale" => &mut n.scale,
                    "shift" => &mut n.shift,
                    "running_mean" => &mut n.running_mean,
                    _ => &mut n.running_var,
                }
            };
            if shape != [target.len()] {
                return Err(Error::Shape(format!("{name} has shape {shape:?}, expected [{}]", target.len())));
            }
            *target = Array1::from(parse_values(&next()?, target.len(), &name)?);
        }
    }
    if model.norms.iter().any(|n| n.running_var.iter().any(|&v| !(v > 0.0))) {
        return Err(Error::Data("checkpoint has a non-positive running variance".into()));
    }
    Ok((model, encoder))
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpModel, FeatureEncoder)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let enc = FeatureEncoder::new(3, 4);
        let mut m = MlpModel::new(enc.width(), [5, 6, 5], 4, 9).unwrap();
        // perturb running stats so they are not the defaults
        let x = ndarray::Array2::from_shape_fn((4, enc.width()), |(i, j)| ((i * 7 + j) % 5) as f64 / 3.0);
        m.forward_train(&x).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &enc, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("mlp-v1 S=3 T=4 dims=5,6,5,4\nfc1.weight 16 5\n"));
        let (back, enc2) = read_checkpoint(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(enc2, enc);
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(std::io::Cursor::new("hello\n")).is_err());
        assert!(read_checkpoint(std::io::Cursor::new("mlp-v1 S=1 T=1 dims=2,2,2,4\nfc1.weight 3 2\n")).is_err());
    }
}
