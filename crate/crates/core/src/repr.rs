//! Per-layer representation sets and the RDMP dump format.
//!
//! An RDMP file holds one layer's activations over a dataset, little-endian:
//!
//! ```text
//! magic "RDMP" | version u32 = 1 | layer_index u32 | N u64 | d u64 | C u32
//! | labels: N x u32 | data: N*d x f32, row-major
//! ```
//!
//! A manifest (JSON array of `{"layer", "file", "stage", "desc"}`) ties the
//! per-layer files of one model together. Feature maps are flattened by the
//! exporter in row-major tensor order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RDMP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 4;

/// One layer's representations: `n` rows of width `dim`, each with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    layer_index: u32,
    n: usize,
    dim: usize,
    classes: u32,
    labels: Vec<u32>,
    data: Vec<f32>,
}

impl RepresentationSet {
    /// Builds a set from row-major `data`, validating every invariant.
    pub fn new(
        layer_index: u32,
        dim: usize,
        classes: u32,
        labels: Vec<u32>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::InvalidSet(format!("need N >= 2 rows, got {n}")));
        }
        if dim == 0 {
            return Err(Error::InvalidSet("dimension must be >= 1".into()));
        }
        if classes == 0 {
            return Err(Error::InvalidSet("class count must be >= 1".into()));
        }
        if data.len() != n * dim {
            return Err(Error::InvalidSet(format!(
                "data length {} does not match {n} rows x {dim} columns",
                data.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSet(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            layer_index,
            n,
            dim,
            classes,
            labels,
            data,
        })
    }

    /// Builds a set from `f64` rows, rounding to single precision storage.
    pub fn from_rows_f64(
        layer_index: u32,
        rows: &[Vec<f64>],
        labels: Vec<u32>,
        classes: u32,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidSet("rows have differing widths".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::InvalidSet(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(layer_index, dim, classes, labels, data)
    }

    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn with_layer_index(mut self, layer_index: u32) -> Self {
        self.layer_index = layer_index;
        self
    }

    /// Number of rows (samples).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row indices grouped by class, in ascending row order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.classes as usize];
        for (i, &label) in self.labels.iter().enumerate() {
            members[label as usize].push(i);
        }
        members
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.n + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        // Writes into a Vec cannot fail.
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.layer_index).unwrap();
        out.write_u64::<LittleEndian>(self.n as u64).unwrap();
        out.write_u64::<LittleEndian>(self.dim as u64).unwrap();
        out.write_u32::<LittleEndian>(self.classes).unwrap();
        for &label in &self.labels {
            out.write_u32::<LittleEndian>(label).unwrap();
        }
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("header"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated("header"));
        }
        let mut cur = Cursor::new(&bytes[4..]);
        let header = |r: std::io::Result<u64>| r.map_err(|_| Error::Truncated("header"));
        let version = header(cur.read_u32::<LittleEndian>().map(u64::from))? as u32;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let layer_index = header(cur.read_u32::<LittleEndian>().map(u64::from))? as u32;
        let n = header(cur.read_u64::<LittleEndian>())?;
        let dim = header(cur.read_u64::<LittleEndian>())?;
        let classes = header(cur.read_u32::<LittleEndian>().map(u64::from))? as u32;

        let remaining = (bytes.len() - HEADER_LEN) as u64;
        let labels_len = n.checked_mul(4).ok_or(Error::Truncated("labels"))?;
        if remaining < labels_len {
            return Err(Error::Truncated("labels"));
        }
        let data_len = n
            .checked_mul(dim)
            .and_then(|c| c.checked_mul(4))
            .ok_or(Error::Truncated("data"))?;
        if remaining - labels_len < data_len {
            return Err(Error::Truncated("data"));
        }
        if remaining - labels_len > data_len {
            return Err(Error::InvalidSet(format!(
                "{} trailing bytes after data block",
                remaining - labels_len - data_len
            )));
        }
        let (n, dim) = (n as usize, dim as usize);

        let mut labels = vec![0u32; n];
        cur.read_u32_into::<LittleEndian>(&mut labels)
            .map_err(|_| Error::Truncated("labels"))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabels(format!(
                "label {bad} >= class count {classes}"
            )));
        }
        let mut data = vec![0f32; n * dim];
        cur.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| Error::Truncated("data"))?;
        Self::new(layer_index, dim, classes, labels, data)
    }
}

/// Writes `set` to `path` in RDMP format.
pub fn write_dump(set: &RepresentationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&set.to_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads and validates an RDMP file.
pub fn read_dump(path: impl AsRef<Path>) -> Result<RepresentationSet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    RepresentationSet::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: u32,
    pub file: String,
    #[serde(default)]
    pub stage: Option<u32>,
    #[serde(default)]
    pub desc: Option<String>,
}

/// The layer files of one model. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl LayerManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn layer_indices(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    /// Loads every layer, failing with all diagnostics joined if the manifest
    /// is inconsistent.
    pub fn load_layers(&self) -> Result<Vec<RepresentationSet>> {
        let diagnostics = validate_manifest(self);
        if !diagnostics.is_empty() {
            let msg = diagnostics
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Manifest(msg));
        }
        self.entries
            .iter()
            .map(|e| read_dump(self.resolve(e)).map(|s| s.with_layer_index(e.layer)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub layer: Option<u32>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(layer) => write!(f, "layer {layer}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks that every file loads, indices are unique and increasing, stages
/// never decrease with depth, and all sets share N, C and labels.
pub fn validate_manifest(manifest: &LayerManifest) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |layer: Option<u32>, message: String| out.push(Diagnostic { layer, message });

    if manifest.entries.is_empty() {
        push(None, "empty manifest".into());
    }

    let mut seen = std::collections::BTreeSet::new();
    for pair in manifest.entries.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.layer < a.layer {
            push(
                Some(b.layer),
                format!(
                    "layer indices not increasing ({} after {})",
                    b.layer, a.layer
                ),
            );
        }
        if let (Some(sa), Some(sb)) = (a.stage, b.stage) {
            if sb < sa {
                push(
                    Some(b.layer),
                    format!("stage decreases with depth ({sb} after {sa})"),
                );
            }
        }
    }
    for e in &manifest.entries {
        if !seen.insert(e.layer) {
            push(Some(e.layer), "duplicate layer".into());
        }
    }

    let mut reference: Option<(u32, RepresentationSet)> = None;
    for e in &manifest.entries {
        let path = manifest.resolve(e);
        let set = match read_dump(&path) {
            Ok(s) => s,
            Err(err) => {
                push(
                    Some(e.layer),
                    format!("failed to load {}: {err}", path.display()),
                );
                continue;
            }
        };
        if set.layer_index() != e.layer {
            push(
                Some(e.layer),
                format!(
                    "layer index mismatch (file says {}, manifest says {})",
                    set.layer_index(),
                    e.layer
                ),
            );
        }
        match &reference {
            None => reference = Some((e.layer, set)),
            Some((ref_layer, first)) => {
                if set.len() != first.len() {
                    push(
                        Some(e.layer),
                        format!(
                            "sample count mismatch ({} vs {} in layer {ref_layer})",
                            set.len(),
                            first.len()
                        ),
                    );
                } else if set.labels() != first.labels() {
                    push(
                        Some(e.layer),
                        format!("label mismatch with layer {ref_layer}"),
                    );
                }
                if set.classes() != first.classes() {
                    push(
                        Some(e.layer),
                        format!(
                            "class count mismatch ({} vs {} in layer {ref_layer})",
                            set.classes(),
                            first.classes()
                        ),
                    );
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RepresentationSet {
        RepresentationSet::new(0, 3, 2, vec![0, 1], vec![1., 0., 0., 0., 1., 0.]).unwrap()
    }

    #[test]
    fn tiny_set_has_expected_byte_length() {
        let bytes = tiny().to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 + 4 + 8 + 24);
        assert_eq!(&bytes[..4], b"RDMP");
        assert_eq!(RepresentationSet::from_bytes(&bytes).unwrap(), tiny());
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let err = RepresentationSet::new(0, 1, 2, vec![0, 2], vec![1., 2.]).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = tiny().to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            RepresentationSet::from_bytes(&bad),
            Err(Error::BadMagic(_))
        ));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            RepresentationSet::from_bytes(&v2),
            Err(Error::UnsupportedVersion(2))
        ));

        bytes.truncate(bytes.len() - 5);
        let err = RepresentationSet::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("truncated"), "{err}");
    }

    #[test]
    fn out_of_range_label_in_file_is_invalid_labels() {
        let mut bytes = tiny().to_bytes();
        bytes[HEADER_LEN + 4] = 9;
        let err = RepresentationSet::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("invalid labels"), "{err}");
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(RepresentationSet::new(0, 1, 1, vec![0], vec![1.]).is_err());
        assert!(RepresentationSet::new(0, 0, 1, vec![0, 0], vec![]).is_err());
        assert!(RepresentationSet::new(0, 1, 1, vec![0, 0], vec![1., f32::NAN]).is_err());
    }
}
