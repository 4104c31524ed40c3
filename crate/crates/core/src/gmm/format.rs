//! Binary model files and the plain-text covariance importer.
//!
//! Layout (little-endian): magic `FEPLLGM1`, `u32 K`, `u32 P`, `f64 rho`, then
//! per component `f64 weight`, `u32 rank`, `f64 tail_value`, `rank` eigenvalues
//! and `rank * P` basis entries in column-major order.

use std::path::Path;

use nalgebra::DMatrix;

use super::{FlatTailComponent, GmmModel};
use crate::binio::{check_magic, put_f64, put_u32, ByteReader};
use crate::error::{FepllError, Result};

pub(crate) const MODEL_MAGIC: &[u8; 8] = b"FEPLLGM1";

pub(crate) fn put_component(out: &mut Vec<u8>, comp: &FlatTailComponent) {
    put_f64(out, comp.weight());
    put_u32(out, comp.rank() as u32);
    put_f64(out, comp.tail_value());
    for &s in comp.kept_eigenvalues() {
        put_f64(out, s);
    }
    for &u in comp.kept_basis() {
        put_f64(out, u);
    }
}

pub(crate) fn read_component(r: &mut ByteReader<'_>, patch_dim: usize) -> Result<FlatTailComponent> {
    let weight = r.f64()?;
    let rank = r.u32()? as usize;
    if rank > patch_dim {
        return Err(FepllError::Format(format!("component rank {rank} exceeds patch dimension {patch_dim}")));
    }
    let tail = r.f64()?;
    let eigenvalues = r.f64_vec(rank)?;
    let basis = r.f64_vec(rank * patch_dim)?;
    FlatTailComponent::from_parts(weight, patch_dim, eigenvalues, basis, tail)
}

pub fn model_to_bytes(model: &GmmModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, model.len() as u32);
    put_u32(&mut out, model.patch_dim() as u32);
    put_f64(&mut out, model.rho());
    for comp in model.components() {
        put_component(&mut out, comp);
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<GmmModel> {
    let mut r = ByteReader::new(bytes);
    check_magic(&mut r, MODEL_MAGIC)?;
    let k = r.u32()? as usize;
    let p = r.u32()? as usize;
    let rho = r.f64()?;
    if k == 0 {
        return Err(FepllError::Format("model declares zero components".into()));
    }
    if p == 0 {
        return Err(FepllError::Format("model declares zero patch dimension".into()));
    }
    let comps = (0..k).map(|_| read_component(&mut r, p)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    GmmModel::new(p, rho, comps).map_err(|e| FepllError::Format(e.to_string()))
}

pub fn write_model(model: &GmmModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<GmmModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes).map_err(|e| match e {
        FepllError::Format(msg) => FepllError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses a whitespace-separated covariance dump: `K P`, then for each
/// component its weight followed by the `P x P` matrix in row-major order.
/// Lines starting with `#` are ignored. Weights are renormalized to sum to one.
pub fn import_text_model(text: &str) -> Result<GmmModel> {
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace);
    let mut next = |what: &str| -> Result<f64> {
        let tok = tokens.next().ok_or_else(|| FepllError::Format(format!("unexpected end of input reading {what}")))?;
        tok.parse::<f64>().map_err(|_| FepllError::Format(format!("bad number {tok:?} for {what}")))
    };
    let k = next("K")?;
    let p = next("P")?;
    if k < 1.0 || p < 1.0 || k.fract() != 0.0 || p.fract() != 0.0 {
        return Err(FepllError::Format(format!("invalid header K={k} P={p}")));
    }
    let (k, p) = (k as usize, p as usize);
    let mut entries = Vec::with_capacity(k);
    for c in 0..k {
        let w = next(&format!("weight of component {c}"))?;
        let mut vals = Vec::with_capacity(p * p);
        for _ in 0..p * p {
            vals.push(next(&format!("covariance of component {c}"))?);
        }
        entries.push((w, DMatrix::from_row_slice(p, p, &vals)));
    }
    if tokens.next().is_some() {
        return Err(FepllError::Format("trailing data after the last component".into()));
    }
    if entries.iter().any(|(w, _)| !(*w > 0.0)) {
        return Err(FepllError::Format("component weights must be positive".into()));
    }
    GmmModel::from_covariances(p, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{eigen_from_covariance, flatten_component};

    fn sample_model() -> GmmModel {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, -0.2, 0.0, -0.2, 0.8, 0.1, 0.0, 0.1, 0.3]);
        let ca = flatten_component(0.3, &eigen_from_covariance(&a).unwrap(), 0.7).unwrap();
        let cb = flatten_component(0.7, &eigen_from_covariance(&b).unwrap(), 0.7).unwrap();
        GmmModel::new(3, 0.7, vec![ca, cb]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let back = model_from_bytes(&model_to_bytes(&model)).unwrap();
        assert_eq!(back, model);
        assert_eq!(model_to_bytes(&back), model_to_bytes(&model));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = model_to_bytes(&sample_model());
        bytes[0] = b'X';
        assert!(model_from_bytes(&bytes).unwrap_err().to_string().contains("bad magic"));
        let mut bytes = model_to_bytes(&sample_model());
        bytes[7] = b'9';
        assert!(model_from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn zero_components_is_rejected() {
        let mut bytes = MODEL_MAGIC.to_vec();
        put_u32(&mut bytes, 0);
        put_u32(&mut bytes, 4);
        put_f64(&mut bytes, 1.0);
        assert!(model_from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = model_to_bytes(&sample_model());
        for cut in [4, 12, 30, bytes.len() - 1] {
            assert!(model_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(model_from_bytes(&longer).is_err());
    }

    #[test]
    fn non_orthonormal_basis_is_rejected() {
        let model = sample_model();
        let mut bytes = model_to_bytes(&model);
        // first basis entry of the first component
        let off = 8 + 4 + 4 + 8 + 8 + 4 + 8 + 8 * model.components()[0].rank();
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        bytes[off..off + 8].copy_from_slice(&(v + 1e-3).to_le_bytes());
        assert!(model_from_bytes(&bytes).unwrap_err().to_string().contains("orthonormal"));
    }

    #[test]
    fn text_import_normalizes_weights() {
        let text = "# two components\n2 2\n1.0\n2 0\n0 1\n3.0\n1 0.5\n0.5 1\n";
        let model = import_text_model(text).unwrap();
        assert_eq!(model.len(), 2);
        assert!((model.components()[0].weight() - 0.25).abs() < 1e-15);
        assert!(model.is_exact());
        let cov = model.components()[1].covariance();
        assert!((cov[(0, 1)] - 0.5).abs() < 1e-12);
        assert!(import_text_model("2 2\n1.0\n1 0\n0 1\n").is_err());
        assert!(import_text_model("1 2\n1.0\n1 0\n0 1\n7").is_err());
    }
}
