//! AVAF binary container and the dataset / text-bank views built on it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVAF" | version u32 | metadata_count u32
//!   | { key_len u32, key, val_len u32, val }*
//!   | entry_count u32
//!   | { name_len u32, name, dtype u8, ndim u8, dims u64*, payload }*
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"AVAF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// One named, typed, row-major tensor with its raw little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub data: Vec<u8>,
}

impl NamedTensor {
    pub fn from_f32(name: impl Into<String>, dims: &[usize], values: &[f32]) -> Self {
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Self::raw(name, DType::F32, dims, data)
    }

    /// Stores `values` rounded to single precision.
    pub fn from_f64_as_f32(name: impl Into<String>, dims: &[usize], values: &[f64]) -> Self {
        let mut data = Vec::with_capacity(values.len() * 4);
        for &v in values {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self::raw(name, DType::F32, dims, data)
    }

    pub fn from_f64(name: impl Into<String>, dims: &[usize], values: &[f64]) -> Self {
        let mut data = Vec::with_capacity(values.len() * 8);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Self::raw(name, DType::F64, dims, data)
    }

    pub fn from_u8(name: impl Into<String>, dims: &[usize], values: &[u8]) -> Self {
        Self::raw(name, DType::U8, dims, values.to_vec())
    }

    fn raw(name: impl Into<String>, dtype: DType, dims: &[usize], data: Vec<u8>) -> Self {
        NamedTensor {
            name: name.into(),
            dtype,
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn expected_bytes(&self) -> usize {
        self.numel() * self.dtype.size()
    }

    /// Validates dims and payload length.
    pub fn check(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::BadDims(self.name.clone()));
        }
        if self.data.len() != self.expected_bytes() {
            return Err(Error::SizeMismatch {
                name: self.name.clone(),
                expected: self.expected_bytes(),
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    /// Decodes the payload into `f64`, whatever the stored dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::U8 => self.data.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

/// Ordered collection of tensors plus a string metadata map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<NamedTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_kind(kind: &str) -> Self {
        let mut c = Self::new();
        c.metadata.insert("kind".into(), kind.into());
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::WrongKind {
                expected: kind.into(),
                found: other.unwrap_or("<none>").into(),
            }),
        }
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.entries.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.into()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for entry in &self.entries {
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::DuplicateName(entry.name.clone()));
            }
            entry.check()?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(e.dtype.code());
            if e.dims.len() > u8::MAX as usize {
                return Err(Error::BadDims(e.name.clone()));
            }
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.data);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut metadata = BTreeMap::new();
        let n_meta = r.u32("metadata")?;
        for _ in 0..n_meta {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let n_entries = r.u32("entry table")?;
        let mut entries = Vec::new();
        for i in 0..n_entries {
            let name = r.string(&format!("entry #{i} name"))?;
            let code = r.u8(&name)?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::UnknownDtype {
                name: name.clone(),
                code,
            })?;
            let ndim = r.u8(&name)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64(&name)?);
            }
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::BadDims(name));
            }
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size() as u64))
                .ok_or_else(|| Error::Truncated(name.clone()))?;
            if numel > (r.buf.len() - r.pos) as u64 {
                return Err(Error::Truncated(name));
            }
            let data = r.take(numel as usize, &name)?.to_vec();
            entries.push(NamedTensor {
                name,
                dtype,
                dims,
                data,
            });
        }
        let c = TensorContainer { metadata, entries };
        c.validate()?;
        Ok(c)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Utf8(what.to_string()))
    }
}

/// Writes `container` to `path` via a temporary sibling and a rename, so a
/// reader never observes a partial file. Invalid containers are rejected
/// before anything touches the filesystem.
pub fn write_container(path: impl AsRef<Path>, container: &TensorContainer) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.encode()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let bytes = fs::read(path)?;
    TensorContainer::decode(&bytes)
}

/// One image's frozen features and supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    /// Patch tokens per stored layer, index 0 is `layer1`. Each is `[N_patch, D_vis]`.
    pub patch_tokens: Vec<Array2<f64>>,
    /// Final-layer CLS token.
    pub cls_token: Array1<f64>,
    /// Ground truth at patch-grid resolution `[g, g]`.
    pub mask: Array2<u8>,
    /// Ground truth at its stored resolution, when that differs from the grid.
    pub mask_full: Option<Array2<u8>>,
    pub label: u8,
    pub class_id: usize,
}

impl FeatureRecord {
    pub fn n_layers(&self) -> usize {
        self.patch_tokens.len()
    }

    pub fn n_patches(&self) -> usize {
        self.patch_tokens[0].nrows()
    }

    pub fn d_vis(&self) -> usize {
        self.cls_token.len()
    }

    pub fn grid_side(&self) -> usize {
        self.mask.nrows()
    }

    /// Mask at the finest resolution available.
    pub fn eval_mask(&self) -> &Array2<u8> {
        self.mask_full.as_ref().unwrap_or(&self.mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextClass {
    pub name: String,
    pub t_n: Array1<f64>,
    pub t_a: Array1<f64>,
}

/// Per-class normal / anomalous text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub classes: Vec<TextClass>,
}

impl TextBank {
    pub fn d_text(&self) -> usize {
        self.classes.first().map_or(0, |c| c.t_n.len())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Validation("text bank has no classes".into()));
        }
        let d = self.d_text();
        let mut names = HashSet::new();
        for (c, class) in self.classes.iter().enumerate() {
            if !names.insert(class.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate class name {:?}",
                    class.name
                )));
            }
            for (tag, v) in [("t_n", &class.t_n), ("t_a", &class.t_a)] {
                if v.len() != d {
                    return Err(Error::Dimension(format!(
                        "class{c}/{tag} has length {}, expected {d}",
                        v.len()
                    )));
                }
                if v.iter().all(|&x| x == 0.0) {
                    return Err(Error::Validation(format!("class{c}/{tag} is all-zero")));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation(format!("class{c}/{tag} is not finite")));
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::with_kind("textbank");
        for (i, class) in self.classes.iter().enumerate() {
            c.metadata.insert(format!("class{i}/name"), class.name.clone());
            let d = class.t_n.len();
            c.push(NamedTensor::from_f64_as_f32(
                format!("class{i}/t_n"),
                &[d],
                class.t_n.as_slice().unwrap(),
            ));
            c.push(NamedTensor::from_f64_as_f32(
                format!("class{i}/t_a"),
                &[d],
                class.t_a.as_slice().unwrap(),
            ));
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        c.expect_kind("textbank")?;
        let mut classes = Vec::new();
        for i in 0.. {
            let Some(t_n) = c.get(&format!("class{i}/t_n")) else {
                break;
            };
            let t_a = c.require(&format!("class{i}/t_a"))?;
            classes.push(TextClass {
                name: c
                    .metadata
                    .get(&format!("class{i}/name"))
                    .cloned()
                    .unwrap_or_else(|| format!("class{i}")),
                t_n: Array1::from(t_n.to_f64()),
                t_a: Array1::from(t_a.to_f64()),
            });
        }
        let bank = TextBank { classes };
        bank.validate()?;
        Ok(bank)
    }
}

/// Serializes records into a `kind=features` container. Floats are stored as f32.
pub fn records_to_container(records: &[FeatureRecord]) -> TensorContainer {
    let mut c = TensorContainer::with_kind("features");
    if let Some(first) = records.first() {
        c.metadata
            .insert("n_layers".into(), first.n_layers().to_string());
    }
    for (i, r) in records.iter().enumerate() {
        for (l, x) in r.patch_tokens.iter().enumerate() {
            let x = x.as_standard_layout();
            c.push(NamedTensor::from_f64_as_f32(
                format!("img{i}/layer{}/patch", l + 1),
                &[x.nrows(), x.ncols()],
                x.as_slice().unwrap(),
            ));
        }
        c.push(NamedTensor::from_f64_as_f32(
            format!("img{i}/cls"),
            &[r.cls_token.len()],
            r.cls_token.as_slice().unwrap(),
        ));
        let m = r.eval_mask().as_standard_layout();
        c.push(NamedTensor::from_u8(
            format!("img{i}/mask"),
            &[m.nrows(), m.ncols()],
            m.as_slice().unwrap(),
        ));
        c.push(NamedTensor::from_u8(format!("img{i}/label"), &[1], &[r.label]));
        c.push(NamedTensor::from_f64(
            format!("img{i}/class"),
            &[1],
            &[r.class_id as f64],
        ));
    }
    c
}

/// Max-pools a binary mask onto a `g × g` grid; each cell covers the source
/// rows `floor(r·H/g) .. ceil((r+1)·H/g)` and likewise for columns.
pub fn pool_mask(mask: &Array2<u8>, g: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((g, g), |(r, c)| {
        let r0 = r * h / g;
        let r1 = ((r + 1) * h).div_ceil(g).max(r0 + 1);
        let c0 = c * w / g;
        let c1 = ((c + 1) * w).div_ceil(g).max(c0 + 1);
        let mut any = 0u8;
        for y in r0..r1.min(h) {
            for x in c0..c1.min(w) {
                any |= mask[[y, x]];
            }
        }
        any
    })
}

fn scalar(c: &TensorContainer, name: &str) -> Result<f64> {
    let t = c.require(name)?;
    t.to_f64()
        .first()
        .copied()
        .ok_or_else(|| Error::MissingTensor(name.into()))
}

/// Decodes and validates every record of a `kind=features` container.
pub fn records_from_container(c: &TensorContainer) -> Result<Vec<FeatureRecord>> {
    c.expect_kind("features")?;
    let mut records = Vec::new();
    for i in 0.. {
        if c.get(&format!("img{i}/cls")).is_none() {
            break;
        }
        records.push(record_from_container(c, i)?);
    }
    let Some(first) = records.first() else {
        return Err(Error::Validation("feature file contains no images".into()));
    };
    let (n, d, l) = (first.n_patches(), first.d_vis(), first.n_layers());
    for (i, r) in records.iter().enumerate() {
        if r.d_vis() != d {
            return Err(Error::Dimension(format!(
                "img{i} has D_vis {}, img0 has {d}",
                r.d_vis()
            )));
        }
        if r.n_patches() != n || r.n_layers() != l {
            return Err(Error::Dimension(format!(
                "img{i} has {} layers × {} patches, img0 has {l} × {n}",
                r.n_layers(),
                r.n_patches()
            )));
        }
    }
    Ok(records)
}

fn record_from_container(c: &TensorContainer, i: usize) -> Result<FeatureRecord> {
    let cls = c.require(&format!("img{i}/cls"))?;
    let d_vis = cls.numel();
    let mut patch_tokens = Vec::new();
    for l in 1.. {
        let Some(t) = c.get(&format!("img{i}/layer{l}/patch")) else {
            break;
        };
        let dims = t.dims_usize();
        if dims.len() != 2 || dims[1] != d_vis {
            return Err(Error::Dimension(format!(
                "img{i}/layer{l}/patch has dims {dims:?}, expected [N, {d_vis}]"
            )));
        }
        patch_tokens.push(Array2::from_shape_vec((dims[0], dims[1]), t.to_f64()).unwrap());
    }
    if patch_tokens.is_empty() {
        return Err(Error::MissingTensor(format!("img{i}/layer1/patch")));
    }
    let n = patch_tokens[0].nrows();
    if patch_tokens.iter().any(|p| p.nrows() != n) {
        return Err(Error::Dimension(format!(
            "img{i}: layers disagree on patch count"
        )));
    }
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::Validation(format!(
            "img{i}: {n} patches do not form a square grid"
        )));
    }
    let m = c.require(&format!("img{i}/mask"))?;
    let mdims = m.dims_usize();
    if mdims.len() != 2 {
        return Err(Error::Dimension(format!(
            "img{i}/mask has dims {mdims:?}, expected 2-D"
        )));
    }
    let mvals = m.to_f64();
    if mvals.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("img{i}/mask is not binary")));
    }
    let raw = Array2::from_shape_vec((mdims[0], mdims[1]), mvals.iter().map(|&v| v as u8).collect())
        .unwrap();
    let (mask, mask_full) = if mdims == [g, g] {
        (raw, None)
    } else {
        if mdims[0] < g || mdims[1] < g {
            return Err(Error::Dimension(format!(
                "img{i}/mask {mdims:?} is coarser than the {g}×{g} patch grid"
            )));
        }
        (pool_mask(&raw, g), Some(raw))
    };
    let label_v = scalar(c, &format!("img{i}/label"))?;
    if label_v != 0.0 && label_v != 1.0 {
        return Err(Error::Validation(format!("img{i}/label {label_v} is not 0/1")));
    }
    let label = label_v as u8;
    let any = mask.iter().any(|&v| v == 1);
    if (label == 1) != any {
        return Err(Error::Validation(format!(
            "img{i}: label {label} inconsistent with mask (any anomalous pixel = {any})"
        )));
    }
    let class_v = scalar(c, &format!("img{i}/class"))?;
    if class_v < 0.0 || class_v.fract() != 0.0 {
        return Err(Error::Validation(format!("img{i}/class {class_v} is not an index")));
    }
    let cls_token = Array1::from(cls.to_f64());
    for (what, finite) in [
        ("cls", cls_token.iter().all(|v| v.is_finite())),
        (
            "patch",
            patch_tokens.iter().all(|p| p.iter().all(|v| v.is_finite())),
        ),
    ] {
        if !finite {
            return Err(Error::Validation(format!("img{i}/{what} is not finite")));
        }
    }
    Ok(FeatureRecord {
        patch_tokens,
        cls_token,
        mask,
        mask_full,
        label,
        class_id: class_v as usize,
    })
}

/// Cross-checks records against a text bank.
pub fn check_against_textbank(records: &[FeatureRecord], bank: &TextBank) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.class_id >= bank.len() {
            return Err(Error::Validation(format!(
                "img{i} references class_id {} but the text bank has {} classes",
                r.class_id,
                bank.len()
            )));
        }
    }
    Ok(())
}

/// Loads and validates a feature file together with its text bank.
pub fn load_dataset(
    features_path: impl AsRef<Path>,
    textbank_path: impl AsRef<Path>,
) -> Result<(Vec<FeatureRecord>, TextBank)> {
    let records = records_from_container(&read_container(features_path)?)?;
    let bank = TextBank::from_container(&read_container(textbank_path)?)?;
    check_against_textbank(&records, &bank)?;
    Ok((records, bank))
}
