//! Self-describing checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "HPCK"
//! version    u32      1
//! header     u32 length, then UTF-8 JSON (see `Header`)
//! records    u32 count, then per record:
//!              name   u32 length, UTF-8
//!              kind   u8   0 frozen, 1 halora, 2 gate, 3 adam m, 4 adam v, 5 class anchors
//!              shape  u32 rank, then u64 per dim
//!              data   f64 per element, row-major
//! ```
//!
//! Parameters are stored in insertion order so a loaded model equals the
//! saved one field for field. A merged checkpoint folds the LoRA factors into
//! the backbone and drops the training state.

use std::collections::BTreeMap;
use std::path::Path;

use headpurify_core::dig::GateConfig;
use headpurify_core::encoder::{EncoderConfig, Model};
use headpurify_core::halora::{LoraConfig, LoraLayout};
use headpurify_core::losses::ClassAnchors;
use headpurify_core::optim::{AdamWConfig, Moments, OptimizerState};
use headpurify_core::param::{ParamGroup, ParamSet};
use headpurify_core::trainer::{Progress, TrainConfig, Trainer};
use headpurify_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::binfmt::{put_f64s, put_preamble, put_u32, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    merged: bool,
    encoder: EncoderConfig,
    lora: Option<LoraConfig>,
    gates: Option<GateConfig>,
    temperature: f64,
    train: Option<TrainConfig>,
    progress: Option<Progress>,
    adam: Option<AdamWConfig>,
    moment_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub progress: Progress,
    pub optim: OptimizerState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub anchors: ClassAnchors,
    pub state: Option<TrainState>,
    pub merged: bool,
}

fn group_tag(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Frozen => 0,
        ParamGroup::Halora => 1,
        ParamGroup::Gate => 2,
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_f64s(out, t.data());
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model: t.model.clone(),
            anchors: t.anchors.clone(),
            state: Some(TrainState {
                config: t.config.clone(),
                progress: t.progress.clone(),
                optim: t.optim.clone(),
            }),
            merged: false,
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let Some(s) = self.state else {
            return Err(Error::Config("checkpoint holds no training state".into()));
        };
        let mut t = Trainer::new(self.model, self.anchors, s.config)?;
        t.progress = s.progress;
        t.optim = s.optim;
        Ok(t)
    }

    /// LoRA deltas folded into Q/V; gates and anchors kept, training state dropped.
    pub fn merged(&self) -> Result<Self> {
        Ok(Self {
            model: self.model.merged()?,
            anchors: self.anchors.clone(),
            state: None,
            merged: true,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let st = self.state.as_ref();
        let header = Header {
            merged: self.merged,
            encoder: m.config.clone(),
            lora: m.lora.as_ref().map(|l| l.config.clone()),
            gates: m.gates.clone(),
            temperature: self.anchors.temperature(),
            train: st.map(|s| s.config.clone()),
            progress: st.map(|s| s.progress.clone()),
            adam: st.map(|s| s.optim.config),
            moment_steps: st
                .map(|s| {
                    s.optim
                        .moments
                        .iter()
                        .map(|(k, v)| (k.clone(), v.step))
                        .collect()
                })
                .unwrap_or_default(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        put_preamble(&mut out, MAGIC, VERSION, &json);
        let moments = st.map(|s| s.optim.moments.len()).unwrap_or(0);
        put_u32(&mut out, (m.params.len() + 2 * moments + 1) as u32);
        for p in m.params.iter() {
            put_record(&mut out, &p.name, group_tag(p.group), &p.value);
        }
        if let Some(s) = st {
            for (name, mo) in &s.optim.moments {
                put_record(&mut out, name, 3, &mo.m);
                put_record(&mut out, name, 4, &mo.v);
            }
        }
        put_record(&mut out, "anchors", 5, self.anchors.tensor());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(buf);
        let header: Header = serde_json::from_slice(r.preamble(MAGIC, VERSION, "checkpoint")?)
            .map_err(|e| format!("header: {e}"))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut m_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut v_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut anchors = None;
        for _ in 0..count {
            let name = r.str()?.to_string();
            let kind = r.u8()?;
            let t = r.tensor()?;
            let group = match kind {
                0 => ParamGroup::Frozen,
                1 => ParamGroup::Halora,
                2 => ParamGroup::Gate,
                3 => {
                    m_acc.insert(name, t);
                    continue;
                }
                4 => {
                    v_acc.insert(name, t);
                    continue;
                }
                5 => {
                    anchors = Some(t);
                    continue;
                }
                k => return Err(format!("record {name}: unknown kind {k}")),
            };
            params.insert(name, t, group).map_err(|e| e.to_string())?;
        }
        r.finish()?;
        let e = &header.encoder;
        let lora = header
            .lora
            .map(|c| LoraLayout::new(c, e.num_layers, e.num_heads, e.head_dim))
            .transpose()
            .map_err(|e| e.to_string())?;
        let model = Model {
            config: header.encoder,
            params,
            lora,
            gates: header.gates,
        };
        let anchors =
            ClassAnchors::new(anchors.ok_or("missing class anchors")?, header.temperature)
                .map_err(|e| e.to_string())?;
        let state = match (header.train, header.progress, header.adam) {
            (Some(config), Some(progress), Some(adam)) => {
                let mut optim = OptimizerState::new(adam);
                for (name, step) in header.moment_steps {
                    let m = m_acc
                        .remove(&name)
                        .ok_or_else(|| format!("missing first moment of {name}"))?;
                    let v = v_acc
                        .remove(&name)
                        .ok_or_else(|| format!("missing second moment of {name}"))?;
                    optim.moments.insert(name, Moments { m, v, step });
                }
                Some(TrainState {
                    config,
                    progress,
                    optim,
                })
            }
            (None, None, None) => None,
            _ => return Err("partial training state in header".into()),
        };
        if !m_acc.is_empty() || !v_acc.is_empty() {
            return Err("moment records without a step count".into());
        }
        Ok(Self {
            model,
            anchors,
            state,
            merged: header.merged,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&buf).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use headpurify_core::trainer::ModelSpec;

    fn sample() -> Checkpoint {
        let spec = ModelSpec {
            encoder: EncoderConfig {
                num_layers: 2,
                ..EncoderConfig::default()
            },
            lora: Some(LoraConfig {
                rank_per_layer: vec![2, 3],
                ..LoraConfig::default()
            }),
            gates: Some(GateConfig::default()),
        };
        let model = spec.build(3).unwrap();
        let anchors = ClassAnchors::random(5, 32, 0.01, 3).unwrap();
        let mut t = Trainer::new(model, anchors, TrainConfig::default()).unwrap();
        t.progress.step = 7;
        let name = t.model.trainable_names(ParamGroup::Gate)[0].clone();
        let m = Tensor::from_fn(&[4], |i| i as f64 * 0.5);
        t.optim.moments.insert(
            name,
            Moments {
                m: m.clone(),
                v: m.scale(2.0),
                step: 7,
            },
        );
        Checkpoint::from_trainer(&t)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn merged_drops_factors_and_state() {
        let m = sample().merged().unwrap();
        assert!(m.model.params.iter().all(|p| p.group != ParamGroup::Halora));
        let back = Checkpoint::from_bytes(&m.to_bytes()).unwrap();
        assert!(back.merged && back.state.is_none() && back.model.lora.is_none());
        assert!(back.into_trainer().is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().contains("magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
