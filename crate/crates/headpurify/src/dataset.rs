//! Dataset files.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "HPDS"
//! version    u32      1
//! header     u32 length, then UTF-8 JSON {"spec": DomainSpec, "seed": u64, "samples": u64}
//! prototypes f64 × num_classes × dim
//! styles     f64 × num_domains × dim
//! samples    per sample: u32 label, u32 domain, f64 × content_tokens × dim
//! ```
//!
//! The manifest CSV has one row per sample with its mean alignment to its
//! class prototype over the task tokens and to its domain style over the
//! confounder tokens.

use std::path::Path;

use headpurify_core::domainsynth::{DomainDataset, DomainSpec, Sample};
use serde::{Deserialize, Serialize};

use crate::binfmt::{put_f64s, put_preamble, put_u32, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HPDS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: DomainSpec,
    seed: u64,
    samples: u64,
}

pub fn to_bytes(ds: &DomainDataset) -> Vec<u8> {
    let header = Header {
        spec: ds.spec.clone(),
        seed: ds.seed,
        samples: ds.samples.len() as u64,
    };
    let mut out = Vec::new();
    put_preamble(
        &mut out,
        MAGIC,
        VERSION,
        &serde_json::to_vec(&header).expect("header serializes"),
    );
    put_f64s(&mut out, ds.prototypes.data());
    put_f64s(&mut out, ds.styles.data());
    for s in &ds.samples {
        put_u32(&mut out, s.label as u32);
        put_u32(&mut out, s.domain as u32);
        put_f64s(&mut out, s.tokens.data());
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> std::result::Result<DomainDataset, String> {
    let mut r = Reader::new(buf);
    let h: Header = serde_json::from_slice(r.preamble(MAGIC, VERSION, "dataset")?)
        .map_err(|e| format!("header: {e}"))?;
    h.spec.validate().map_err(|e| e.to_string())?;
    let s = &h.spec;
    let prototypes = r.f64s(&[s.num_classes, s.dim])?;
    let styles = r.f64s(&[s.num_domains, s.dim])?;
    let mut samples = Vec::new();
    for i in 0..h.samples {
        let label = r.u32()? as usize;
        let domain = r.u32()? as usize;
        if label >= s.num_classes || domain >= s.num_domains {
            return Err(format!(
                "sample {i}: label {label} or domain {domain} out of range"
            ));
        }
        let tokens = r.f64s(&[s.content_tokens, s.dim])?;
        samples.push(Sample {
            tokens,
            label,
            domain,
        });
    }
    r.finish()?;
    Ok(DomainDataset {
        spec: h.spec,
        seed: h.seed,
        prototypes,
        styles,
        samples,
    })
}

pub fn save(ds: &DomainDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ds)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<DomainDataset> {
    let buf = std::fs::read(path).map_err(Error::io(path))?;
    from_bytes(&buf).map_err(|m| Error::format(path, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub domain: usize,
    pub label: usize,
    pub task_alignment: f64,
    pub style_alignment: f64,
}

fn mean_dot(
    ds: &DomainDataset,
    sample: &Sample,
    tokens: std::ops::Range<usize>,
    dir: &[f64],
) -> f64 {
    let d = ds.spec.dim;
    let n = tokens.len().max(1) as f64;
    tokens
        .map(|k| {
            sample.tokens.data()[k * d..(k + 1) * d]
                .iter()
                .zip(dir)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

pub fn manifest(ds: &DomainDataset) -> Vec<ManifestRow> {
    let s = &ds.spec;
    let conf = s.task_tokens..s.task_tokens + s.confounder_tokens;
    ds.samples
        .iter()
        .enumerate()
        .map(|(index, x)| ManifestRow {
            index,
            domain: x.domain,
            label: x.label,
            task_alignment: mean_dot(ds, x, 0..s.task_tokens, ds.prototypes.row(x.label)),
            style_alignment: mean_dot(ds, x, conf.clone(), ds.styles.row(x.domain)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use headpurify_core::domainsynth::make_dataset;

    #[test]
    fn binary_round_trip() {
        let spec = DomainSpec {
            samples_per_domain_class: 3,
            ..DomainSpec::default()
        };
        let ds = make_dataset(&spec, 9).unwrap();
        let bytes = to_bytes(&ds);
        assert_eq!(from_bytes(&bytes).unwrap(), ds);
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn manifest_reflects_the_planted_signal() {
        let ds = make_dataset(&DomainSpec::default(), 2).unwrap();
        let rows = manifest(&ds);
        assert_eq!(rows.len(), ds.len());
        let mean = |f: fn(&ManifestRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        assert!(mean(|r| r.task_alignment) > 0.5);
        assert!(mean(|r| r.style_alignment) > 1.0);
    }
}
