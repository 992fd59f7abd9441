//! Learned content-free correlations exported as CSV and 8-bit PGM.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::tensor::{Tape, Tensor};

fn require_untied(model: &Model, operation: &'static str) -> Result<()> {
    if !model.config.variant.is_untied() || !model.config.positional {
        return Err(Error::UnsupportedVariant {
            variant: model.config.variant.to_string(),
            operation,
        });
    }
    Ok(())
}

/// Per-head positional term added to the scores, after bias and reset.
pub fn positional_heatmaps(model: &Model, n: usize) -> Result<Vec<Tensor>> {
    require_untied(model, "positional heatmaps")?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let state = model::positional_state(&mut tape, &model.config, &vars, n)?;
    let heads = state
        .untied_final
        .ok_or_else(|| Error::invalid("model has no untied positional term"))?;
    Ok(heads.iter().map(|&v| tape.value(v).clone()).collect())
}

pub fn to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::invalid(format!("bad CSV value {f:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Binary P5 image, min-max normalized to 0..=255. A constant matrix maps
/// to all zeros.
pub fn to_pgm(m: &Tensor) -> Vec<u8> {
    let (rows, cols) = m.dims2();
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Width, height and pixels of a P5 image written by [`to_pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::invalid("malformed PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?;
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels.to_vec()))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

/// Writes `head_<h>.csv` and `head_<h>.pgm` for every head.
pub fn export_positional_heatmaps(model: &Model, n: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let heads = positional_heatmaps(model, n)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut written = Vec::with_capacity(2 * heads.len());
    for (h, m) in heads.iter().enumerate() {
        written.push(write(out_dir.join(format!("head_{h}.csv")), to_csv(m).as_bytes())?);
        written.push(write(out_dir.join(format!("head_{h}.pgm")), &to_pgm(m))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EncodingVariant;
    use crate::ModelConfig;

    fn model(variant: EncodingVariant) -> Model {
        Model::new(ModelConfig {
            d: 16,
            heads: 4,
            layers: 1,
            d_ff: 32,
            n_max: 10,
            vocab_size: 10,
            variant,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(EncodingVariant::TupeR);
        let files = export_positional_heatmaps(&m, 9, dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let heads = positional_heatmaps(&m, 9).unwrap();
        for (h, v) in heads.iter().enumerate() {
            let csv = parse_csv(&fs::read_to_string(dir.path().join(format!("head_{h}.csv"))).unwrap()).unwrap();
            assert_eq!(csv.shape(), &[9, 9]);
            for (a, b) in csv.data().iter().zip(v.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-300));
            }
            let row0 = csv.row(0);
            assert!(row0.iter().all(|&x| x == row0[0]));
            let (w, ht, px) = parse_pgm(&fs::read(dir.path().join(format!("head_{h}.pgm"))).unwrap()).unwrap();
            assert_eq!((w, ht), (9, 9));
            assert!(px.contains(&0) && px.contains(&255));
        }
    }

    #[test]
    fn pgm_extremes() {
        let m = Tensor::matrix(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(parse_pgm(&to_pgm(&m)).unwrap().2, vec![0, 128, 255]);
        let flat = Tensor::filled(&[2, 2], 4.0);
        assert_eq!(parse_pgm(&to_pgm(&flat)).unwrap().2, vec![0; 4]);
    }

    #[test]
    fn tied_variants_are_rejected() {
        let err = positional_heatmaps(&model(EncodingVariant::AbsBaseline), 4).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVariant { .. }));
    }
}
