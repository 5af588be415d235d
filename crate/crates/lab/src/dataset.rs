//! Dataset and feature files.
//!
//! Datasets (`FSDS`): magic, version u32, sample count u64, class counts
//! (bonafide, print, replay) u64, image height, width and channels u32, then
//! per sample the image as f64 values, label u8, domain u16, attack u8 and
//! group u32.
//!
//! Feature tables (`FSFT`): magic, version u32, row count u64, width u32,
//! the rows as f64, then one label u8 per row, then one domain u16 per row.

use std::collections::BTreeMap;

use fedsis_core::model::ImageShape;
use fedsis_core::synth::{AttackType, ClassCounts, DomainDataset, SyntheticSample};
use fedsis_core::Real;

use crate::codec::{put_u32, Reader};
use crate::error::{LabError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const FEATURE_MAGIC: &[u8; 4] = b"FSFT";
pub const VERSION: u32 = 1;

fn counts_of(domains: &[DomainDataset]) -> ClassCounts {
    domains.iter().fold(ClassCounts { bonafide: 0, print: 0, replay: 0 }, |acc, d| {
        let c = d.counts();
        ClassCounts {
            bonafide: acc.bonafide + c.bonafide,
            print: acc.print + c.print,
            replay: acc.replay + c.replay,
        }
    })
}

/// Writes several domains into one file. All must share an image shape.
pub fn encode_dataset(domains: &[DomainDataset]) -> Result<Vec<u8>> {
    let image = domains.first().ok_or_else(|| LabError::format("FSDS file", "no domains to write"))?.image;
    if domains.iter().any(|d| d.image != image) {
        return Err(LabError::format("FSDS file", "domains have different image shapes"));
    }
    let c = counts_of(domains);
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, VERSION);
    for n in [c.total(), c.bonafide, c.print, c.replay] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for e in [image.height, image.width, image.channels] {
        put_u32(&mut out, e as u32);
    }
    for s in domains.iter().flat_map(|d| &d.samples) {
        for &v in &s.image {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
        out.push(s.label);
        out.extend_from_slice(&s.domain.to_le_bytes());
        out.push(s.attack.code());
        out.extend_from_slice(&s.group.to_le_bytes());
    }
    Ok(out)
}

/// Reads a dataset file back into one dataset per domain id, ascending.
/// Sample ids are reassigned from each sample's position within its domain.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<DomainDataset>> {
    let what = "FSDS file";
    let mut r = Reader::new(bytes, what);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::format(what, format!("unsupported version {version}")));
    }
    let total = r.u64()? as usize;
    let declared = ClassCounts {
        bonafide: r.u64()? as usize,
        print: r.u64()? as usize,
        replay: r.u64()? as usize,
    };
    if declared.total() != total {
        return Err(LabError::format(what, "class counts do not add up to the sample count"));
    }
    let image = ImageShape {
        height: r.u32()? as usize,
        width: r.u32()? as usize,
        channels: r.u32()? as usize,
    };
    let mut by_domain: BTreeMap<u16, Vec<SyntheticSample>> = BTreeMap::new();
    for i in 0..total {
        let pixels = (0..image.numel()).map(|_| r.f64().map(|v| v as Real)).collect::<Result<Vec<_>>>()?;
        let label = r.u8()?;
        let domain = r.u16()?;
        let attack = AttackType::from_code(r.u8()?)?;
        let group = r.u32()?;
        if (label == 1) != (attack == AttackType::None) || label > 1 {
            return Err(LabError::format(what, format!("sample {i}: label {label} contradicts attack {attack:?}")));
        }
        let list = by_domain.entry(domain).or_default();
        list.push(SyntheticSample {
            image: pixels,
            label,
            domain,
            attack,
            group,
            uid: (domain as u64) << 32 | list.len() as u64,
        });
    }
    r.finish()?;
    let domains: Vec<DomainDataset> = by_domain
        .into_iter()
        .map(|(domain, samples)| DomainDataset { domain, image, samples })
        .collect();
    if counts_of(&domains) != declared {
        return Err(LabError::format(what, "class counts in the header do not match the samples"));
    }
    for d in &domains {
        d.validate()?;
    }
    Ok(domains)
}

/// Per-sample feature vectors with labels and domain ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub width: usize,
    /// Row-major, `labels.len() × width`.
    pub values: Vec<Real>,
    pub labels: Vec<u8>,
    pub domains: Vec<u16>,
}

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[Real] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.domains.len() != n || self.values.len() != n * self.width {
            return Err(LabError::format("feature table", "column lengths disagree"));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(LabError::format("feature table", "labels must be 0 or 1"));
        }
        Ok(())
    }
}

pub fn encode_features(t: &FeatureTable) -> Result<Vec<u8>> {
    t.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    put_u32(&mut out, t.width as u32);
    for &v in &t.values {
        out.extend_from_slice(&(v as f64).to_le_bytes());
    }
    out.extend_from_slice(&t.labels);
    for d in &t.domains {
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureTable> {
    let what = "FSFT file";
    let mut r = Reader::new(bytes, what);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::format(what, format!("unsupported version {version}")));
    }
    let rows = r.u64()? as usize;
    let width = r.u32()? as usize;
    let values = (0..rows * width).map(|_| r.f64().map(|v| v as Real)).collect::<Result<Vec<_>>>()?;
    let labels = r.take(rows)?.to_vec();
    let domains = (0..rows).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let t = FeatureTable {
        width,
        values,
        labels,
        domains,
    };
    t.validate()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsis_core::synth::{domain_specs, generate};

    fn domains() -> Vec<DomainDataset> {
        let image = ImageShape {
            height: 4,
            width: 4,
            channels: 3,
        };
        let counts = ClassCounts {
            bonafide: 4,
            print: 2,
            replay: 1,
        };
        domain_specs(3, image, counts, 1.0, 0.05, 1, 2)
            .iter()
            .map(|s| generate(s, 0.5, 3).unwrap())
            .collect()
    }

    #[test]
    fn dataset_round_trips() {
        let d = domains();
        let back = decode_dataset(&encode_dataset(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn dataset_header_is_checked() {
        let bytes = encode_dataset(&domains()).unwrap();
        assert_eq!(&bytes[..4], b"FSDS");
        let mut bad = bytes.clone();
        bad[12] ^= 1; // sample count
        assert!(decode_dataset(&bad).is_err());
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn label_attack_mismatch_is_rejected() {
        let mut d = domains();
        d[0].samples[0].label = 0;
        let bytes = encode_dataset(&d).unwrap();
        let err = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(err.contains("contradicts"), "{err}");
    }

    #[test]
    fn features_round_trip() {
        let t = FeatureTable {
            width: 2,
            values: vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-9],
            labels: vec![1, 0, 1],
            domains: vec![0, 2, 2],
        };
        let back = decode_features(&encode_features(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.row(1), &[2.0, 3.25]);
    }

    #[test]
    fn ragged_features_are_rejected() {
        let t = FeatureTable {
            width: 2,
            values: vec![0.5],
            labels: vec![1],
            domains: vec![0],
        };
        assert!(encode_features(&t).is_err());
    }
}
