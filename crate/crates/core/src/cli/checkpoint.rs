//! Binary checkpoints: a short header, then one little-endian `f64` block
//! per tensor. A text sidecar lists the block names and shapes.
//!
//! Layout: `GEOPARAM` magic, `u32` version, `u32` block count, then per
//! block `u32` rows, `u32` cols and `rows·cols` values.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"GEOPARAM";
pub const VERSION: u32 = 1;

/// Every tensor needed to restore a model exactly, frozen angles and
/// running statistics included.
fn state(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let mut push = |name: &str, t: Tensor| out.push((format!("layer{i}.{name}"), t));
        match &layer.params {
            ParamSet::Sp { weight, bias } => {
                push("weight", weight.clone());
                push("bias", bias.clone());
            }
            ParamSet::Wn {
                direction,
                length,
                bias,
            } => {
                push("direction", direction.clone());
                push("length", length.clone());
                push("bias", bias.clone());
            }
            ParamSet::BnSp {
                weight,
                bias,
                gamma,
                beta,
            } => {
                push("weight", weight.clone());
                push("bias", bias.clone());
                push("gamma", gamma.clone());
                push("beta", beta.clone());
            }
            ParamSet::Gmp {
                theta, radius, scale, ..
            } => {
                push("theta", theta.clone());
                push("radius", radius.clone());
                push("scale", scale.clone());
            }
        }
        if layer.norm.is_used() {
            let n = &layer.norm;
            push("running_mean", Tensor::row_vector(n.running_mean.clone()));
            if !n.running_var.is_empty() {
                push("running_var", Tensor::row_vector(n.running_var.clone()));
            }
            push("stats_initialized", Tensor::scalar(f64::from(u8::from(n.initialized))));
        }
    }
    out
}

fn load_state(model: &mut Model, blocks: Vec<Tensor>) -> Result<()> {
    let mut blocks = blocks.into_iter();
    for layer in model.layers_mut() {
        let mut targets: Vec<&mut Tensor> = match &mut layer.params {
            ParamSet::Sp { weight, bias } => vec![weight, bias],
            ParamSet::Wn {
                direction,
                length,
                bias,
            } => vec![direction, length, bias],
            ParamSet::BnSp {
                weight,
                bias,
                gamma,
                beta,
            } => vec![weight, bias, gamma, beta],
            ParamSet::Gmp {
                theta, radius, scale, ..
            } => vec![theta, radius, scale],
        };
        for t in targets.iter_mut() {
            **t = blocks.next().ok_or_else(|| Error::InvalidSpec("checkpoint ended early".into()))?;
        }
        if layer.norm.is_used() {
            let mut next = || blocks.next().ok_or_else(|| Error::InvalidSpec("checkpoint ended early".into()));
            layer.norm.running_mean = next()?.into_data();
            if !layer.norm.running_var.is_empty() {
                layer.norm.running_var = next()?.into_data();
            }
            layer.norm.initialized = next()?.data()[0] != 0.0;
        }
    }
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("shapes.txt")
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let blocks = state(model);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    let mut shapes = String::new();
    for (name, t) in &blocks {
        bytes.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        shapes.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, shapes).map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                line: 0,
                message: "truncated checkpoint".into(),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads raw blocks without reference to any model.
pub fn read_blocks(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let mut r = Reader { bytes: &bytes, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Tensor::matrix(rows, cols, data)?);
    }
    if !r.bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(blocks)
}

/// Overwrites `model`'s state from `path`. Block names and shapes must
/// match the model's own, per the sidecar.
pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let blocks = read_blocks(path)?;
    let side = sidecar_path(path);
    let listing = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let expected = state(model);
    let lines: Vec<&str> = listing.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != blocks.len() || blocks.len() != expected.len() {
        return Err(Error::InvalidSpec(format!(
            "checkpoint has {} blocks ({} listed), model needs {}",
            blocks.len(),
            lines.len(),
            expected.len()
        )));
    }
    for (i, ((line, block), (name, want))) in lines.iter().zip(&blocks).zip(&expected).enumerate() {
        let listed = format!("{name} {} {}", block.rows(), block.cols());
        if line.trim() != listed {
            return Err(Error::Parse {
                path: side.clone(),
                line: i + 1,
                message: format!("`{line}` does not match block `{listed}`"),
            });
        }
        if block.shape() != want.shape() {
            return Err(Error::InvalidSpec(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                block.shape(),
                want.shape()
            )));
        }
    }
    load_state(model, blocks)?;
    model.check_invariants()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::model::{Loss, MlpSpec, Parameterization, Targets};

    fn trained_model(param: Parameterization, seed: u64) -> Model {
        let spec = MlpSpec::mlp(3, &[5, 4], 2, param, Loss::Mse, seed);
        let mut model = Model::from_seed(spec).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.5, 0.3, -0.7], vec![0.0, 0.9, 0.2]]).unwrap();
        let y = Targets::Values(Tensor::zeros(3, 2));
        let rec = model.loss_forward(&x, &y, Mode::Train).unwrap();
        model.commit_stats(&rec.stats);
        model
    }

    #[test]
    fn roundtrip_is_bit_exact_for_every_parameterization() {
        let dir = tempfile::tempdir().unwrap();
        for param in Parameterization::ALL {
            let path = dir.path().join(format!("{param}.bin"));
            let model = trained_model(param, 1);
            save_checkpoint(&model, &path).unwrap();
            let mut fresh = trained_model(param, 2);
            assert_ne!(fresh, model);
            load_checkpoint(&mut fresh, &path).unwrap();
            assert_eq!(fresh.layers(), model.layers(), "{param}");
        }
    }

    #[test]
    fn sidecar_lists_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&trained_model(Parameterization::GmpImn, 0), &path).unwrap();
        let listing = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(listing.starts_with("layer0.theta 5 2\nlayer0.radius 1 5\n"), "{listing}");
        assert!(listing.contains("layer1.running_mean 1 5\n"));
    }

    #[test]
    fn rejects_mismatched_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&trained_model(Parameterization::Sp, 0), &path).unwrap();
        let mut other = trained_model(Parameterization::Wn, 0);
        assert!(load_checkpoint(&mut other, &path).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_blocks(&path), Err(Error::Parse { .. })));
        fs::write(&path, b"NOTACKPT\x01\x00\x00\x00").unwrap();
        assert!(read_blocks(&path).unwrap_err().to_string().contains("not a checkpoint"));
    }
}
