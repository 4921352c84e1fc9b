//! Sectioned binary model bundle.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TBLT" | version u32 | total length u64
//! repeated: name length u16 | name | payload length u64 | payload
//! ```
//!
//! Sections `config`, `preprocessing` and `history` hold JSON; `params`
//! holds named tensors as `f64` little-endian values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{InputShape, Model};
use crate::tabular::{FittedImputer, TabularTransform};
use crate::train::History;

pub const BUNDLE_MAGIC: &[u8; 4] = b"TBLT";
pub const BUNDLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Fitted tabular preprocessing, frozen at training time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Preprocessing {
    pub imputer: Option<FittedImputer>,
    pub transform: Option<TabularTransform>,
    /// Names of the window statistics appended to the tabular columns.
    #[serde(default)]
    pub summary_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub model: Model,
    pub preprocessing: Preprocessing,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
struct ConfigSection {
    run: RunConfig,
    shape: InputShape,
}

fn put_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Bounds-checked little-endian reader.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated bundle: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("section name is not UTF-8".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_params(payload: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = c.string(n)?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<usize>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let bytes = c.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        out.push((name, t));
    }
    if !c.done() {
        return Err(Error::Format("trailing bytes in params section".into()));
    }
    Ok(out)
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&ConfigSection {
            run: self.config.clone(),
            shape: self.model.shape.clone(),
        })?;
        let mut body = Vec::new();
        put_section(&mut body, "config", &config);
        put_section(&mut body, "params", &encode_params(&self.model.params));
        put_section(&mut body, "preprocessing", &serde_json::to_vec(&self.preprocessing)?);
        put_section(&mut body, "history", &serde_json::to_vec(&self.history)?);
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&((HEADER_LEN + body.len()) as u64).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4).map_err(|_| Error::Format("file too short for a bundle header".into()))? != BUNDLE_MAGIC {
            return Err(Error::Format("not a model bundle (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "bundle format version {version} is incompatible with supported version {BUNDLE_VERSION}"
            )));
        }
        let total = c.len()?;
        if total != bytes.len() {
            return Err(Error::Format(format!(
                "bundle length {} differs from recorded length {total}",
                bytes.len()
            )));
        }
        let (mut config, mut params, mut prep, mut history) = (None, None, None, None);
        while !c.done() {
            let n = c.u16()? as usize;
            let name = c.string(n)?;
            let len = c.len()?;
            let payload = c.take(len)?;
            let json_err = |e: serde_json::Error| Error::Format(format!("section `{name}`: {e}"));
            match name.as_str() {
                "config" => config = Some(serde_json::from_slice::<ConfigSection>(payload).map_err(json_err)?),
                "params" => params = Some(decode_params(payload)?),
                "preprocessing" => prep = Some(serde_json::from_slice::<Preprocessing>(payload).map_err(json_err)?),
                "history" => history = Some(serde_json::from_slice::<History>(payload).map_err(json_err)?),
                other => log::warn!("ignoring unknown bundle section `{other}`"),
            }
        }
        let missing = |s: &str| Error::Format(format!("bundle has no `{s}` section"));
        let config = config.ok_or_else(|| missing("config"))?;
        let params = params.ok_or_else(|| missing("params"))?;
        let mut model = Model::new(config.run.model.clone(), config.shape, 0)
            .map_err(|e| Error::Format(format!("bundle config does not build a model: {e}")))?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "bundle has {} parameters, model needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for (name, t) in params {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, model needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(Self {
            config: config.run,
            model,
            preprocessing: prep.ok_or_else(|| missing("preprocessing"))?,
            history: history.ok_or_else(|| missing("history"))?,
        })
    }

    /// Writes to a temporary sibling first so a failed write never leaves a
    /// partial bundle behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read bundle {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::{DataConfig, InterpretConfig, SeriesData};
    use crate::model::{Inputs, ModelConfig, ModelKind};
    use crate::nn::ModelRng;
    use crate::rwkv::EncoderConfig;
    use crate::train::{Task, TrainConfig};
    use rand::{Rng, SeedableRng};

    fn bundle() -> ModelBundle {
        let mut mc = ModelConfig::new(ModelKind::Forecaster);
        mc.encoder = EncoderConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            dropout: 0.0,
        };
        mc.horizon = 4;
        let shape = InputShape {
            channel_names: vec!["a".into(), "b".into()],
            series_len: 48,
            tab_width: 0,
        };
        let mut model = Model::new(mc.clone(), shape, 3).unwrap();
        // perturb every weight so zero-initialized ones are exercised too
        let mut rng = ModelRng::seed_from_u64(1);
        for id in model.params.ids().collect::<Vec<_>>() {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        ModelBundle {
            config: RunConfig {
                model: mc,
                train: TrainConfig {
                    task: Task::Forecasting,
                    ..TrainConfig::default()
                },
                data: DataConfig::Series(SeriesData {
                    path: "series.csv".into(),
                    input_len: 48,
                    window_stride: 24,
                }),
                interpret: InterpretConfig::default(),
            },
            model,
            preprocessing: Preprocessing::default(),
            history: History::default(),
        }
    }

    #[test]
    fn round_trip_predicts_bit_identically() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tblt");
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        let mut rng = ModelRng::seed_from_u64(2);
        let series = Tensor::from_fn(&[3, 2, 48], |_| rng.random_range(-5.0..5.0));
        let inputs = Inputs {
            series: Some(&series),
            tabular: None,
        };
        let p1 = b.model.predict(&inputs).unwrap();
        let p2 = back.model.predict(&inputs).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1.output), bits(&p2.output));
        assert_eq!(back.config, b.config);
    }

    #[test]
    fn truncated_bundle_is_a_format_error() {
        let bytes = bundle().to_bytes().unwrap();
        for cut in [0, 3, 10, 16, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = ModelBundle::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = bundle().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&(BUNDLE_VERSION + 1).to_le_bytes());
        let err = ModelBundle::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("incompatible"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = bundle().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(ModelBundle::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
