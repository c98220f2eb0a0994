//! Text checkpoints. Values are stored as hexadecimal `f64` bit patterns so a
//! save/load round trip is exact.
//!
//! ```text
//! mocha-checkpoint 1
//! stage stage1
//! config {"vocab":6,...}
//! params 26
//! param enc.0.fwd.w_x 16,96 3fb9...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::config::Stage;
use crate::error::{Error, Result};
use crate::model::{MochaModel, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "mocha-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn bad(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Checkpoint { field: field.into(), reason: reason.into() }
}

impl Checkpoint {
    pub fn from_model(model: &MochaModel, stage: Stage) -> Self {
        Checkpoint { stage, config: model.config.clone(), params: model.store.clone() }
    }

    pub fn into_model(self) -> Result<MochaModel> {
        MochaModel::with_params(self.config, self.params)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "{MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "stage {}", self.stage).unwrap();
        writeln!(s, "config {}", serde_json::to_string(&self.config)?).unwrap();
        writeln!(s, "params {}", self.params.len()).unwrap();
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(s, "param {name} {}", shape.join(",")).unwrap();
            for x in t.data() {
                write!(s, " {:016x}", x.to_bits()).unwrap();
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |field: &str| lines.next().ok_or_else(|| bad(field, "unexpected end of file"));
        let header = next("header")?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("header", format!("not a checkpoint: '{header}'")))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad("version", format!("found {version}, expected {CHECKPOINT_VERSION}")));
        }
        let stage = next("stage")?
            .strip_prefix("stage ")
            .ok_or_else(|| bad("stage", "missing stage line"))?
            .parse()
            .map_err(|e: Error| bad("stage", e.to_string()))?;
        let config_json = next("config")?.strip_prefix("config ").ok_or_else(|| bad("config", "missing config line"))?;
        let config: ModelConfig = serde_json::from_str(config_json).map_err(|e| bad("config", e.to_string()))?;
        let count: usize = next("params")?
            .strip_prefix("params ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad("params", "missing parameter count"))?;
        let mut params = ParamStore::new();
        for i in 0..count {
            let line = next("param")?;
            let mut parts = line.split(' ');
            if parts.next() != Some("param") {
                return Err(bad(format!("param #{i}"), "expected a param line"));
            }
            let name = parts.next().ok_or_else(|| bad(format!("param #{i}"), "missing name"))?;
            let shape: Vec<usize> = parts
                .next()
                .ok_or_else(|| bad(name, "missing shape"))?
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(name, format!("invalid shape entry '{d}'"))))
                .collect::<Result<_>>()?;
            let data: Vec<f64> = parts
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| bad(name, format!("invalid value '{h}'")))
                })
                .collect::<Result<_>>()?;
            let expected: usize = shape.iter().product();
            if data.len() != expected {
                return Err(bad(name, format!("shape {shape:?} needs {expected} values, found {}", data.len())));
            }
            if params.find(name).is_some() {
                return Err(bad(name, "duplicate parameter"));
            }
            params.add(name, Tensor::new(shape, data)?);
        }
        if let Some(extra) = lines.next() {
            return Err(bad("trailer", format!("unexpected content after parameters: '{extra}'")));
        }
        let ckpt = Checkpoint { stage, config, params };
        // Confirms the parameters fit the declared architecture.
        MochaModel::with_params(ckpt.config.clone(), ckpt.params.clone())?;
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MochaModel {
        let cfg = ModelConfig { vocab: 3, feat_dim: 2, subsample: 1, enc_hidden: 3, enc_layers: 1, dec_hidden: 3, emb_dim: 2, attn_dim: 3, chunk_width: 2, energy_offset: -4.0 };
        MochaModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = small();
        model.store.tensors_mut()[0].data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let ckpt = Checkpoint::from_model(&model, Stage::Stage1);
        ckpt.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1, "temporary file left behind: {names:?}");
    }

    #[test]
    fn tampering_is_rejected_with_field() {
        let text = Checkpoint::from_model(&small(), Stage::Stage2).to_text().unwrap();
        let shape_tampered = text.replacen("param enc.0.fwd.w_x 2,12", "param enc.0.fwd.w_x 2,11", 1);
        assert_ne!(shape_tampered, text);
        match Checkpoint::parse(&shape_tampered) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "enc.0.fwd.w_x"),
            other => panic!("{other:?}"),
        }
        let reshaped = text.replacen("param enc.0.fwd.w_x 2,12", "param enc.0.fwd.w_x 12,2", 1);
        assert!(matches!(Checkpoint::parse(&reshaped), Err(Error::Checkpoint { .. })));
        let version = text.replacen("mocha-checkpoint 1", "mocha-checkpoint 9", 1);
        assert!(matches!(Checkpoint::parse(&version), Err(Error::Checkpoint { field, .. }) if field == "version"));
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::parse(&truncated).is_err());
        let bad_hex = text.replacen("param ctc.b 4 ", "param ctc.b 4 zz", 1);
        assert!(Checkpoint::parse(&bad_hex).is_err());
    }
}
