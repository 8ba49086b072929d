//! Single-file model container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                      |
//! |--------|------|--------------------------------------------|
//! | 0      | 8    | magic `SVDCOMP\0`                          |
//! | 8      | 4    | format version (u32, currently 1)          |
//! | 12     | 4    | CRC-32 (IEEE) of manifest bytes ‖ blob     |
//! | 16     | 8    | manifest length in bytes (u64)             |
//! | 24     | 8    | blob length in bytes (u64)                 |
//! | 32     | …    | UTF-8 JSON manifest, then the blob         |
//!
//! The manifest lists every layer with byte ranges into the blob. Dense
//! weights are row-major f32. Packed weights store two f32 scale tables and
//! the u16 cells. `docs/format.md` has the full description.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{Activation, LayerSpec, TaskKind, ToyModel};
use crate::pack::{unpack, LayerFactors, PackedWeight};
use crate::rank::IntegerAllocation;

pub const MAGIC: [u8; 8] = *b"SVDCOMP\0";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Structural problems of a container file.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a model container (bad magic bytes)")]
    BadMagic,
    #[error("unsupported container version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("container truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("container has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

fn manifest_error(detail: impl Into<String>) -> Error {
    ContainerError::Manifest(detail.into()).into()
}

/// How one layer's weight is stored.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Dense(DenseMatrix),
    Packed(PackedWeight),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub name: String,
    pub activation: Activation,
    pub compressible: bool,
    pub payload: LayerPayload,
}

impl StoredLayer {
    pub fn shape(&self) -> (usize, usize) {
        match &self.payload {
            LayerPayload::Dense(w) => w.shape(),
            LayerPayload::Packed(p) => (p.m(), p.n()),
        }
    }
}

/// In-memory form of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub kind: Option<TaskKind>,
    pub layers: Vec<StoredLayer>,
    pub allocation: Option<IntegerAllocation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    kind: Option<TaskKind>,
    layers: Vec<ManifestLayer>,
    #[serde(default)]
    allocation: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    name: String,
    m: usize,
    n: usize,
    activation: Activation,
    compressible: bool,
    storage: Storage,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Storage {
    Dense { dtype: String, data: Span },
    Packed { k: usize, layout: u8, u_scales: Span, v_scales: Span, slots: Span },
}

/// Byte range into the blob.
#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct Span {
    offset: u64,
    len: u64,
}

impl ModelContainer {
    /// Dense container of `model`. Weights are stored as f32, so f64 weights
    /// are rounded on the way out.
    pub fn from_model(model: &ToyModel, kind: Option<TaskKind>) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| StoredLayer {
                name: l.name.clone(),
                activation: l.activation,
                compressible: l.compressible,
                payload: LayerPayload::Dense(l.weight.clone()),
            })
            .collect();
        Self { kind, layers, allocation: None }
    }

    /// Container with packed payloads where `packed[i]` is set and dense ones
    /// elsewhere.
    pub fn with_packed(
        model: &ToyModel,
        kind: Option<TaskKind>,
        packed: &[Option<PackedWeight>],
        allocation: Option<IntegerAllocation>,
    ) -> Result<Self> {
        if packed.len() != model.layers().len() {
            return Err(Error::InvalidArgument(format!(
                "{} packed slots for {} layers",
                packed.len(),
                model.layers().len()
            )));
        }
        let mut out = Self::from_model(model, kind);
        for (layer, p) in out.layers.iter_mut().zip(packed) {
            if let Some(p) = p {
                if (p.m(), p.n()) != layer.shape() {
                    return Err(Error::shape(
                        "ModelContainer::with_packed",
                        format!("`{}` is {:?}, packed weight is {}x{}", layer.name, layer.shape(), p.m(), p.n()),
                    ));
                }
                layer.payload = LayerPayload::Packed(p.clone());
            }
        }
        out.allocation = allocation;
        Ok(out)
    }

    /// Model with dense weights; packed layers become the product of their
    /// dequantized factors.
    pub fn dense_model(&self) -> Result<ToyModel> {
        ToyModel::new(
            self.layers
                .iter()
                .map(|l| LayerSpec {
                    name: l.name.clone(),
                    weight: match &l.payload {
                        LayerPayload::Dense(w) => w.clone(),
                        LayerPayload::Packed(p) => unpack(p).product(),
                    },
                    activation: l.activation,
                    compressible: l.compressible,
                })
                .collect(),
        )
    }

    /// Factor pairs for a factored forward pass. Packed layers unpack;
    /// dense compressible layers become `W · I`; dense fixed layers are `None`.
    pub fn factors(&self) -> Vec<Option<LayerFactors>> {
        self.layers
            .iter()
            .map(|l| match &l.payload {
                LayerPayload::Packed(p) => Some(unpack(p)),
                LayerPayload::Dense(w) if l.compressible => Some(LayerFactors {
                    w1: w.clone(),
                    w2: DenseMatrix::identity(w.cols()),
                }),
                LayerPayload::Dense(_) => None,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut put = |bytes: &[u8]| -> Span {
            let span = Span { offset: blob.len() as u64, len: bytes.len() as u64 };
            blob.extend_from_slice(bytes);
            span
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (m, n) = l.shape();
            let storage = match &l.payload {
                LayerPayload::Dense(w) => {
                    if !w.is_finite() {
                        return Err(Error::NonFinite("container weights"));
                    }
                    let bytes: Vec<u8> = w.to_f32_vec().iter().flat_map(|v| v.to_le_bytes()).collect();
                    Storage::Dense { dtype: "f32".into(), data: put(&bytes) }
                }
                LayerPayload::Packed(p) => {
                    let f32s = |v: &[f32]| -> Vec<u8> { v.iter().flat_map(|x| x.to_le_bytes()).collect() };
                    let u_scales = put(&f32s(p.u_scales()));
                    let v_scales = put(&f32s(p.v_scales()));
                    let cells: Vec<u8> = p.slots().iter().flat_map(|c| c.to_le_bytes()).collect();
                    Storage::Packed { k: p.k(), layout: p.layout().tag(), u_scales, v_scales, slots: put(&cells) }
                }
            };
            layers.push(ManifestLayer {
                name: l.name.clone(),
                m,
                n,
                activation: l.activation,
                compressible: l.compressible,
                storage,
            });
        }
        let allocation = match &self.allocation {
            Some(a) => Some(serde_json::from_str(&a.to_json()?)?),
            None => None,
        };
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            layers,
            allocation,
        })?;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&manifest);
        hasher.update(&blob);
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blob.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&hasher.finalize().to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Parses and validates a whole container; nothing is returned unless
    /// every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let prefix = bytes.len().min(MAGIC.len());
        if bytes[..prefix] != MAGIC[..prefix] {
            return Err(ContainerError::BadMagic.into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(ContainerError::Truncated { expected: HEADER_LEN as u64, actual: bytes.len() as u64 }.into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion { found: version }.into());
        }
        let stored_crc = u32_at(12);
        let (manifest_len, blob_len) = (u64_at(16), u64_at(24));
        let expected = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .and_then(|v| v.checked_add(blob_len))
            .ok_or_else(|| manifest_error("section lengths overflow"))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(ContainerError::Truncated { expected, actual }.into());
        }
        if actual > expected {
            return Err(ContainerError::TrailingBytes { extra: actual - expected }.into());
        }
        let body = &bytes[HEADER_LEN..];
        let computed = crc32fast::hash(body);
        if computed != stored_crc {
            return Err(ContainerError::ChecksumMismatch { stored: stored_crc, computed }.into());
        }
        let (manifest_bytes, blob) = body.split_at(manifest_len as usize);
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| manifest_error(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(manifest_error(format!(
                "manifest version {} disagrees with header version {FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        let section = |span: Span, expected_len: usize, what: &str, layer: &str| -> Result<&[u8]> {
            let end = span.offset.checked_add(span.len).filter(|&e| e <= blob.len() as u64);
            match end {
                Some(end) if span.len == expected_len as u64 => Ok(&blob[span.offset as usize..end as usize]),
                Some(_) => Err(manifest_error(format!(
                    "`{layer}` {what}: {} bytes where {expected_len} are needed",
                    span.len
                ))),
                None => Err(manifest_error(format!("`{layer}` {what} lies outside the blob"))),
            }
        };
        let f32s = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for l in manifest.layers {
            let payload = match l.storage {
                Storage::Dense { dtype, data } => {
                    if dtype != "f32" {
                        return Err(manifest_error(format!("`{}`: unsupported dtype `{dtype}`", l.name)));
                    }
                    let count = l.m.checked_mul(l.n).and_then(|c| c.checked_mul(4));
                    let count = count.ok_or_else(|| manifest_error("layer dimensions overflow"))?;
                    let raw = f32s(section(data, count, "weights", &l.name)?);
                    let w = DenseMatrix::from_f32(l.m, l.n, &raw).map_err(|e| manifest_error(e.to_string()))?;
                    if !w.is_finite() {
                        return Err(manifest_error(format!("`{}` has non-finite weights", l.name)));
                    }
                    LayerPayload::Dense(w)
                }
                Storage::Packed { k, layout, u_scales, v_scales, slots } => {
                    let cells = k
                        .checked_mul(l.m.max(l.n))
                        .ok_or_else(|| manifest_error("layer dimensions overflow"))?;
                    let u = f32s(section(u_scales, 4 * k, "u scales", &l.name)?);
                    let v = f32s(section(v_scales, 4 * k, "v scales", &l.name)?);
                    let raw = section(slots, 2 * cells, "cells", &l.name)?;
                    let cells: Vec<u16> =
                        raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
                    let p = PackedWeight::from_parts(l.m, l.n, k, layout, u, v, cells)
                        .map_err(|e| manifest_error(format!("`{}`: {e}", l.name)))?;
                    LayerPayload::Packed(p)
                }
            };
            layers.push(StoredLayer {
                name: l.name,
                activation: l.activation,
                compressible: l.compressible,
                payload,
            });
        }
        let allocation = match manifest.allocation {
            Some(v) => Some(
                IntegerAllocation::from_json(&v.to_string()).map_err(|e| manifest_error(e.to_string()))?,
            ),
            None => None,
        };
        let out = Self { kind: manifest.kind, layers, allocation };
        out.validate()?;
        Ok(out)
    }

    /// Layer chain, unique names and allocation coverage.
    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(manifest_error("no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|p| p.name == l.name) {
                return Err(manifest_error(format!("duplicate layer `{}`", l.name)));
            }
            if i > 0 && self.layers[i - 1].shape().1 != l.shape().0 {
                return Err(manifest_error(format!("`{}` does not chain onto its predecessor", l.name)));
            }
        }
        if let Some(alloc) = &self.allocation {
            for e in &alloc.entries {
                match self.layers.iter().find(|l| l.name == e.layer) {
                    Some(l) if l.shape() == (e.m, e.n) => {}
                    _ => return Err(manifest_error(format!("allocation entry `{}` matches no layer", e.layer))),
                }
            }
        }
        Ok(())
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pack::pack_factors;
    use crate::rank::LayerRankInt;
    use crate::rng::{gaussian_matrix, seeded};

    fn dense_container() -> ModelContainer {
        ModelContainer::from_model(&ToyModel::teacher(TaskKind::CharLm), Some(TaskKind::CharLm))
    }

    fn mixed_container() -> ModelContainer {
        let model = ToyModel::teacher(TaskKind::TeacherStudentRegression);
        let mut rng = seeded(4);
        let w1 = gaussian_matrix(&mut rng, 32, 5);
        let w2 = gaussian_matrix(&mut rng, 5, 32);
        let packed = vec![None, Some(pack_factors(&w1, &w2).unwrap()), None];
        let alloc = IntegerAllocation {
            entries: vec![LayerRankInt { layer: "mlp.1".into(), m: 32, n: 32, k: 5 }],
        };
        ModelContainer::with_packed(&model, None, &packed, Some(alloc)).unwrap()
    }

    fn bits(m: &ToyModel) -> Vec<u64> {
        m.layers().iter().flat_map(|l| l.weight.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn dense_round_trip_is_bitwise() {
        let c = dense_container();
        let bytes = c.to_bytes().unwrap();
        let back = ModelContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(bits(&back.dense_model().unwrap()), bits(&ToyModel::teacher(TaskKind::CharLm)));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn packed_round_trip_keeps_factors() {
        let c = mixed_container();
        let back = ModelContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let before = c.factors();
        let after = back.factors();
        assert!(before[1].is_some());
        assert_eq!(before, after);
    }

    #[test]
    fn header_layout() {
        let bytes = dense_container().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SVDCOMP\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let ml = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let bl = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), HEADER_LEN + ml + bl);
        // All dense f32 payloads: 32·48 + 48·32 + 32·48 + 48·16 weights.
        assert_eq!(bl, 4 * (3 * 32 * 48 + 48 * 16));
        assert_eq!(bytes[HEADER_LEN], b'{');
    }

    fn load_err(bytes: &[u8]) -> ContainerError {
        match ModelContainer::from_bytes(bytes) {
            Err(Error::Container(e)) => e,
            other => panic!("expected a container error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_headers_are_typed() {
        let good = dense_container().to_bytes().unwrap();

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(load_err(&b), ContainerError::BadMagic));
        assert!(matches!(load_err(b"PK\x03\x04"), ContainerError::BadMagic));

        let mut b = good.clone();
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(load_err(&b), ContainerError::UnsupportedVersion { found: 2 }));

        assert!(matches!(load_err(&good[..20]), ContainerError::Truncated { .. }));
        assert!(matches!(load_err(&good[..good.len() - 1]), ContainerError::Truncated { .. }));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(load_err(&b), ContainerError::TrailingBytes { extra: 1 }));

        let mut b = good.clone();
        let last = b.len() - 1;
        b[last] ^= 0x40;
        assert!(matches!(load_err(&b), ContainerError::ChecksumMismatch { .. }));
    }

    /// Rewrites the manifest and fixes up lengths and checksum, so only the
    /// manifest checks can fire.
    fn with_manifest(good: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let ml = u64::from_le_bytes(good[16..24].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&good[HEADER_LEN..HEADER_LEN + ml]).unwrap();
        edit(&mut manifest);
        let text = serde_json::to_vec(&manifest).unwrap();
        let blob = &good[HEADER_LEN + ml..];
        let mut body = text.clone();
        body.extend_from_slice(blob);
        let mut out = good[..HEADER_LEN].to_vec();
        out[12..16].copy_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out[16..24].copy_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    #[test]
    fn inconsistent_manifests_are_rejected() {
        let good = mixed_container().to_bytes().unwrap();
        let cases: Vec<Box<dyn Fn(&mut serde_json::Value)>> = vec![
            Box::new(|v| v["layers"][0]["storage"]["data"]["len"] = 12.into()),
            Box::new(|v| v["layers"][0]["storage"]["data"]["offset"] = 1_000_000.into()),
            Box::new(|v| v["layers"][0]["storage"]["dtype"] = "f16".into()),
            Box::new(|v| v["layers"][1]["storage"]["layout"] = 1.into()),
            Box::new(|v| v["layers"][2]["name"] = "mlp.0".into()),
            Box::new(|v| v["layers"][2]["m"] = 31.into()),
            Box::new(|v| v["format_version"] = 7.into()),
            Box::new(|v| v["allocation"]["mlp.9"] = serde_json::json!({"k": 1, "m": 32, "n": 32})),
            Box::new(|v| v["extra"] = true.into()),
        ];
        for (i, edit) in cases.iter().enumerate() {
            let b = with_manifest(&good, edit);
            assert!(matches!(load_err(&b), ContainerError::Manifest(_)), "case {i}");
        }
        // The fix-up itself leaves a valid file.
        assert!(ModelContainer::from_bytes(&with_manifest(&good, |_| {})).is_ok());
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svdc");
        let c = mixed_container();
        c.save(&path).unwrap();
        assert_eq!(ModelContainer::load(&path).unwrap(), c);
        assert!(!dir.path().join("model.svdc.partial").exists());
        std::fs::write(&path, b"SVDCOMP\0\x01").unwrap();
        assert!(ModelContainer::load(&path).is_err());
    }

    #[test]
    fn factors_reproduce_the_dense_model() {
        let c = mixed_container();
        let model = c.dense_model().unwrap();
        let x = gaussian_matrix(&mut seeded(2), 8, 16);
        let dense = model.forward(&x).unwrap();
        let factors = c.factors();
        let factored = model.forward_mode(&x, &crate::model::ForwardMode::Factored(&factors)).unwrap();
        assert!(dense.distance(&factored) <= 1e-12 * dense.frobenius_norm());
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]

        #[test]
        fn random_containers_round_trip_bitwise(seed in 0u64..10_000, k in 1usize..16) {
            let model = ToyModel::random(TaskKind::TeacherStudentRegression, seed);
            let mut rng = seeded(seed);
            let w1 = gaussian_matrix(&mut rng, 32, k);
            let w2 = gaussian_matrix(&mut rng, k, 32);
            let packed = vec![None, Some(pack_factors(&w1, &w2).unwrap()), None];
            let alloc = IntegerAllocation {
                entries: vec![LayerRankInt { layer: "mlp.1".into(), m: 32, n: 32, k }],
            };
            let c = ModelContainer::with_packed(&model, Some(TaskKind::TeacherStudentRegression), &packed, Some(alloc))
                .unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = ModelContainer::from_bytes(&bytes).unwrap();
            proptest::prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            proptest::prop_assert_eq!(back, c);
        }
    }
}
