//! Embedding banks and downstream datasets, plus their on-disk formats.
//!
//! Both formats are little-endian and share one framing:
//!
//! ```text
//! DATB: "DATB" | version u16 | flags u16 | m u64 | D_img u32 | d u32 | header_crc u32
//!       | images m*D_img f32 | feats m*d f32 | caption_feats m*d f32 | latent_class m*i32
//!       | caption blob length u64 | m * (offset u64, len u64) | UTF-8 caption blob
//!       | payload crc u32
//! DATD: "DATD" | version u16 | flags u16 | n u64 | C u32 | D_img u32 | d u32 | header_crc u32
//!       | images n*D_img f32 | labels n*u32 | class_text_feats C*d f32
//!       | names table | descriptions table | payload crc u32
//! ```
//!
//! `header_crc` is the CRC32 of the header bytes before it; the payload crc
//! covers every byte between `header_crc` and the trailing checksum. A string
//! table is `blob length u64 | count * (offset u64, len u64) | blob`.

use std::fs;
use std::path::Path;

use crate::error::{DatError, Result};

pub const BANK_MAGIC: &[u8; 4] = b"DATB";
pub const DATASET_MAGIC: &[u8; 4] = b"DATD";
pub const FORMAT_VERSION: u16 = 1;

/// Allowed deviation of a stored feature row from unit Euclidean norm.
pub const NORM_TOLERANCE: f64 = 1e-5;

const BANK_HEADER_LEN: usize = 28;
const DATASET_HEADER_LEN: usize = 32;

/// The pre-training corpus. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub image_dim: usize,
    pub feat_dim: usize,
    pub images: Vec<f32>,
    pub feats: Vec<f32>,
    pub caption_feats: Vec<f32>,
    pub captions: Vec<String>,
    /// Synthetic ground truth, -1 for out-of-distribution records.
    pub latent_class: Vec<i32>,
}

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.latent_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent_class.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_dim..(i + 1) * self.image_dim]
    }

    pub fn feat(&self, i: usize) -> &[f32] {
        &self.feats[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn caption_feat(&self, i: usize) -> &[f32] {
        &self.caption_feats[i * self.feat_dim..(i + 1) * self.feat_dim]
    }
}

/// Labeled downstream data together with the class text features.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamDataset {
    pub image_dim: usize,
    pub feat_dim: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub class_descriptions: Vec<String>,
    pub class_text_feats: Vec<f32>,
}

impl DownstreamDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_dim..(i + 1) * self.image_dim]
    }

    pub fn class_text_feat(&self, c: usize) -> &[f32] {
        &self.class_text_feats[c * self.feat_dim..(c + 1) * self.feat_dim]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

fn check_finite(field: &str, values: &[f32], width: usize, out: &mut Vec<String>) {
    if let Some((idx, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        let row = idx.checked_div(width).unwrap_or(0);
        out.push(format!("{field}[{row}]: non-finite entry {v}"));
    }
}

fn check_unit_rows(field: &str, values: &[f32], width: usize, out: &mut Vec<String>) {
    if width == 0 {
        return;
    }
    for (row, chunk) in values.chunks(width).enumerate() {
        let norm = chunk
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            out.push(format!(
                "{field}[{row}]: row norm {norm:.6} (expected 1 +/- {NORM_TOLERANCE:e})"
            ));
        }
    }
}

fn check_len(field: &str, actual: usize, expected: usize, out: &mut Vec<String>) -> bool {
    if actual != expected {
        out.push(format!("{field}: length {actual}, expected {expected}"));
        false
    } else {
        true
    }
}

/// Lists every invariant violation of a bank. An empty list means valid.
pub fn validate_bank(bank: &EmbeddingBank) -> Vec<String> {
    let mut out = Vec::new();
    let m = bank.latent_class.len();
    if bank.image_dim == 0 {
        out.push("image_dim: 0, expected positive".into());
    }
    if bank.feat_dim == 0 {
        out.push("feat_dim: 0, expected positive".into());
    }
    let shapes_ok = [
        check_len("images", bank.images.len(), m * bank.image_dim, &mut out),
        check_len("feats", bank.feats.len(), m * bank.feat_dim, &mut out),
        check_len("caption_feats", bank.caption_feats.len(), m * bank.feat_dim, &mut out),
        check_len("captions", bank.captions.len(), m, &mut out),
    ];
    check_finite("images", &bank.images, bank.image_dim, &mut out);
    check_finite("feats", &bank.feats, bank.feat_dim, &mut out);
    check_finite("caption_feats", &bank.caption_feats, bank.feat_dim, &mut out);
    if shapes_ok.iter().all(|&ok| ok) {
        check_unit_rows("feats", &bank.feats, bank.feat_dim, &mut out);
        check_unit_rows("caption_feats", &bank.caption_feats, bank.feat_dim, &mut out);
    }
    for (i, &c) in bank.latent_class.iter().enumerate() {
        if c < -1 {
            out.push(format!("latent_class[{i}]: {c}, expected >= -1"));
        }
    }
    out
}

/// Analogous validator for [`DownstreamDataset`].
pub fn validate_dataset(ds: &DownstreamDataset) -> Vec<String> {
    let mut out = Vec::new();
    let n = ds.labels.len();
    let c = ds.class_names.len();
    if n == 0 {
        out.push("labels: empty, expected n >= 1".into());
    }
    if c == 0 {
        out.push("class_names: empty, expected C >= 1".into());
    }
    if ds.image_dim == 0 {
        out.push("image_dim: 0, expected positive".into());
    }
    if ds.feat_dim == 0 {
        out.push("feat_dim: 0, expected positive".into());
    }
    let shapes_ok = [
        check_len("images", ds.images.len(), n * ds.image_dim, &mut out),
        check_len("class_descriptions", ds.class_descriptions.len(), c, &mut out),
        check_len("class_text_feats", ds.class_text_feats.len(), c * ds.feat_dim, &mut out),
    ];
    check_finite("images", &ds.images, ds.image_dim, &mut out);
    check_finite("class_text_feats", &ds.class_text_feats, ds.feat_dim, &mut out);
    if shapes_ok.iter().all(|&ok| ok) {
        check_unit_rows("class_text_feats", &ds.class_text_feats, ds.feat_dim, &mut out);
    }
    for (i, &y) in ds.labels.iter().enumerate() {
        if y as usize >= c {
            out.push(format!("labels[{i}]: {y}, expected in [0, {c})"));
        }
    }
    out
}

/// Signed-label check used by callers that hold labels as i64 before
/// converting them into a dataset.
pub fn validate_labels(labels: &[i64], num_classes: usize) -> Vec<String> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y < 0 || y as usize >= num_classes)
        .map(|(i, y)| format!("labels[{i}]: {y}, expected in [0, {num_classes})"))
        .collect()
}

// ---------------------------------------------------------------------------
// encoding

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn i32s(&mut self, vs: &[i32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn strings(&mut self, items: &[String]) {
        let blob_len: usize = items.iter().map(String::len).sum();
        self.u64(blob_len as u64);
        let mut offset = 0u64;
        for s in items {
            self.u64(offset);
            self.u64(s.len() as u64);
            offset += s.len() as u64;
        }
        for s in items {
            self.buf.extend_from_slice(s.as_bytes());
        }
    }
    fn header_crc(&mut self) {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
    }
    fn finish(mut self, header_len: usize) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf[header_len..]);
        self.u32(crc);
        self.buf
    }
}

fn dim_u32(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| DatError::Validation(vec![format!("{name}: {v} exceeds u32")]))
}

/// Serializes a bank into DATB bytes after validating it.
pub fn encode_bank(bank: &EmbeddingBank) -> Result<Vec<u8>> {
    let violations = validate_bank(bank);
    if !violations.is_empty() {
        return Err(DatError::Validation(violations));
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(BANK_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(0);
    w.u64(bank.len() as u64);
    w.u32(dim_u32("image_dim", bank.image_dim)?);
    w.u32(dim_u32("feat_dim", bank.feat_dim)?);
    w.header_crc();
    w.f32s(&bank.images);
    w.f32s(&bank.feats);
    w.f32s(&bank.caption_feats);
    w.i32s(&bank.latent_class);
    w.strings(&bank.captions);
    Ok(w.finish(BANK_HEADER_LEN))
}

pub fn encode_bank_file(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    let bytes = encode_bank(bank)?;
    fs::write(path, bytes).map_err(|e| DatError::io(path, e))
}

pub fn encode_dataset(ds: &DownstreamDataset) -> Result<Vec<u8>> {
    let violations = validate_dataset(ds);
    if !violations.is_empty() {
        return Err(DatError::Validation(violations));
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(0);
    w.u64(ds.len() as u64);
    w.u32(dim_u32("num_classes", ds.num_classes())?);
    w.u32(dim_u32("image_dim", ds.image_dim)?);
    w.u32(dim_u32("feat_dim", ds.feat_dim)?);
    w.header_crc();
    w.f32s(&ds.images);
    w.u32s(&ds.labels);
    w.f32s(&ds.class_text_feats);
    w.strings(&ds.class_names);
    w.strings(&ds.class_descriptions);
    Ok(w.finish(DATASET_HEADER_LEN))
}

pub fn encode_dataset_file(ds: &DownstreamDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| DatError::io(path, e))
}

// ---------------------------------------------------------------------------
// decoding

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Fails with a truncation error if `expected_total` bytes are not present.
    fn require(&self, expected_total: u64) -> Result<()> {
        if (self.bytes.len() as u64) < expected_total {
            return Err(DatError::Truncated {
                what: self.what.to_string(),
                expected: expected_total,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }

    fn take(&mut self, len: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f32s(&mut self, count: usize) -> Vec<f32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
    fn i32s(&mut self, count: usize) -> Vec<i32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
    fn u32s(&mut self, count: usize) -> Vec<u32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    /// Reads a string table. `tail` is the number of bytes known to follow it.
    fn strings(&mut self, count: usize, tail: u64) -> Result<Vec<String>> {
        let fixed = 8 + 16 * count as u64;
        self.require(self.pos as u64 + fixed + tail)?;
        let blob_len = self.u64();
        let pairs: Vec<(u64, u64)> = (0..count).map(|_| (self.u64(), self.u64())).collect();
        self.require(self.pos as u64 + blob_len + tail)?;
        let blob = self.take(blob_len as usize);
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (off, len))| {
                let end = off.checked_add(len).filter(|&e| e <= blob_len).ok_or_else(|| {
                    DatError::Format(format!("{} string {i}: span {off}+{len} outside blob", self.what))
                })?;
                String::from_utf8(blob[off as usize..end as usize].to_vec())
                    .map_err(|_| DatError::Format(format!("{} string {i}: invalid UTF-8", self.what)))
            })
            .collect()
    }
}

fn check_header(
    r: &mut Reader<'_>,
    magic: &[u8; 4],
    header_len: usize,
    kind: &'static str,
) -> Result<()> {
    if r.bytes.len() < 4 || &r.bytes[..4] != magic {
        let found = String::from_utf8_lossy(&r.bytes[..r.bytes.len().min(4)]).into_owned();
        return Err(DatError::Format(format!(
            "bad magic {found:?}, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    r.require(header_len as u64)?;
    let stored = u32::from_le_bytes(r.bytes[header_len - 4..header_len].try_into().unwrap());
    let computed = crc32fast::hash(&r.bytes[..header_len - 4]);
    if stored != computed {
        return Err(DatError::Format(format!(
            "corrupt header: crc {stored:#010x} != {computed:#010x}"
        )));
    }
    r.pos = 4;
    let version = r.u16();
    if version != FORMAT_VERSION {
        return Err(DatError::Version {
            kind,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let _flags = r.u16();
    Ok(())
}

fn verify_payload(r: &mut Reader<'_>, header_len: usize) -> Result<()> {
    r.require(r.pos as u64 + 4)?;
    let payload_end = r.pos;
    let stored = r.u32();
    let computed = crc32fast::hash(&r.bytes[header_len..payload_end]);
    if stored != computed {
        return Err(DatError::Checksum { stored, computed });
    }
    if r.pos != r.bytes.len() {
        return Err(DatError::Format(format!(
            "{} trailing bytes after checksum",
            r.bytes.len() - r.pos
        )));
    }
    Ok(())
}

fn to_usize(v: u64, name: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| DatError::Format(format!("{name} {v} too large")))
}

fn mul_bytes(parts: &[u64]) -> Result<u64> {
    parts
        .iter()
        .try_fold(1u64, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| DatError::Format("declared sizes overflow".into()))
}

pub fn decode_bank(bytes: &[u8]) -> Result<EmbeddingBank> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "DATB file",
    };
    check_header(&mut r, BANK_MAGIC, BANK_HEADER_LEN, "DATB")?;
    let m = r.u64();
    let image_dim = r.u32() as u64;
    let feat_dim = r.u32() as u64;
    r.pos = BANK_HEADER_LEN;

    // fixed-size arrays, then the string table, then the crc
    let arrays = mul_bytes(&[m, image_dim + 2 * feat_dim + 1, 4])?;
    r.require(BANK_HEADER_LEN as u64 + arrays + 8 + 16 * m + 4)?;
    let mu = to_usize(m, "record count")?;
    let (di, df) = (image_dim as usize, feat_dim as usize);
    let images = r.f32s(mu * di);
    let feats = r.f32s(mu * df);
    let caption_feats = r.f32s(mu * df);
    let latent_class = r.i32s(mu);
    let captions = r.strings(mu, 4)?;
    verify_payload(&mut r, BANK_HEADER_LEN)?;

    let bank = EmbeddingBank {
        image_dim: di,
        feat_dim: df,
        images,
        feats,
        caption_feats,
        captions,
        latent_class,
    };
    let violations = validate_bank(&bank);
    if !violations.is_empty() {
        return Err(DatError::Validation(violations));
    }
    Ok(bank)
}

pub fn decode_bank_file(path: &Path) -> Result<EmbeddingBank> {
    let bytes = fs::read(path).map_err(|e| DatError::io(path, e))?;
    decode_bank(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DownstreamDataset> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "DATD file",
    };
    check_header(&mut r, DATASET_MAGIC, DATASET_HEADER_LEN, "DATD")?;
    let n = r.u64();
    let c = r.u32() as u64;
    let image_dim = r.u32() as u64;
    let feat_dim = r.u32() as u64;
    r.pos = DATASET_HEADER_LEN;

    let arrays = mul_bytes(&[n, image_dim + 1, 4])? + mul_bytes(&[c, feat_dim, 4])?;
    let tables_min = 2 * (8 + 16 * c);
    r.require(DATASET_HEADER_LEN as u64 + arrays + tables_min + 4)?;
    let nu = to_usize(n, "sample count")?;
    let cu = to_usize(c, "class count")?;
    let images = r.f32s(nu * image_dim as usize);
    let labels = r.u32s(nu);
    let class_text_feats = r.f32s(cu * feat_dim as usize);
    let class_names = r.strings(cu, 8 + 16 * c + 4)?;
    let class_descriptions = r.strings(cu, 4)?;
    verify_payload(&mut r, DATASET_HEADER_LEN)?;

    let ds = DownstreamDataset {
        image_dim: image_dim as usize,
        feat_dim: feat_dim as usize,
        images,
        labels,
        class_names,
        class_descriptions,
        class_text_feats,
    };
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        return Err(DatError::Validation(violations));
    }
    Ok(ds)
}

pub fn decode_dataset_file(path: &Path) -> Result<DownstreamDataset> {
    let bytes = fs::read(path).map_err(|e| DatError::io(path, e))?;
    decode_dataset(&bytes)
}

/// Normalizes `row` in place to unit Euclidean norm, computing in f64.
pub fn normalize_row(row: &mut [f32]) -> Result<()> {
    let norm = row
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(DatError::Degenerate(format!("row norm {norm}")));
    }
    for x in row.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

/// A short human-readable summary of a DATB/DATD/DATC header.
pub fn describe_header(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 8 {
        return Err(DatError::Truncated {
            what: "header".into(),
            expected: 8,
            actual: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    match &bytes[..4] {
        m if m == BANK_MAGIC => {
            let bank = decode_bank(bytes)?;
            let in_dist = bank.latent_class.iter().filter(|&&c| c >= 0).count();
            Ok(format!(
                "DATB v{version}: m={} D_img={} d={} in_distribution={} bytes={}",
                bank.len(),
                bank.image_dim,
                bank.feat_dim,
                in_dist,
                bytes.len()
            ))
        }
        m if m == DATASET_MAGIC => {
            let ds = decode_dataset(bytes)?;
            Ok(format!(
                "DATD v{version}: n={} C={} D_img={} d={} classes={:?} bytes={}",
                ds.len(),
                ds.num_classes(),
                ds.image_dim,
                ds.feat_dim,
                ds.class_names,
                bytes.len()
            ))
        }
        m if m == crate::trainer::checkpoint::CHECKPOINT_MAGIC => {
            let params = crate::trainer::checkpoint::decode_checkpoint(bytes)?;
            Ok(format!(
                "DATC v{version}: D_img={} h={} d={} C={} params={} bytes={}",
                params.input_dim(),
                params.hidden_dim(),
                params.embed_dim(),
                params.num_classes(),
                params.num_params(),
                bytes.len()
            ))
        }
        other => Err(DatError::Format(format!(
            "unknown magic {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_rows(rng: &mut impl Rng, rows: usize, width: usize) -> Vec<f32> {
        let mut out: Vec<f32> = (0..rows * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in out.chunks_mut(width) {
            row[0] += 2.0;
            normalize_row(row).unwrap();
        }
        out
    }

    pub(crate) fn random_bank(seed: u64, m: usize, image_dim: usize, feat_dim: usize) -> EmbeddingBank {
        let mut rng = crate::rng::stream(&[crate::rng::domain::FIXTURE, seed]);
        EmbeddingBank {
            image_dim,
            feat_dim,
            images: (0..m * image_dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            feats: unit_rows(&mut rng, m, feat_dim),
            caption_feats: unit_rows(&mut rng, m, feat_dim),
            captions: (0..m).map(|i| format!("caption {i} \u{e9}")).collect(),
            latent_class: (0..m).map(|_| rng.gen_range(-1..5)).collect(),
        }
    }

    fn small_dataset() -> DownstreamDataset {
        let mut rng = crate::rng::stream(&[7]);
        DownstreamDataset {
            image_dim: 3,
            feat_dim: 2,
            images: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            labels: vec![0, 1, 1, 0],
            class_names: vec!["a".into(), "b".into()],
            class_descriptions: vec!["first".into(), "second".into()],
            class_text_feats: vec![1.0, 0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn empty_bank_is_forty_bytes() {
        let bank = EmbeddingBank {
            image_dim: 4,
            feat_dim: 4,
            images: vec![],
            feats: vec![],
            caption_feats: vec![],
            captions: vec![],
            latent_class: vec![],
        };
        let bytes = encode_bank(&bank).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(decode_bank(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn three_record_roundtrip() {
        let bank = random_bank(0, 3, 5, 4);
        let bytes = encode_bank(&bank).unwrap();
        assert_eq!(decode_bank(&bytes).unwrap(), bank);
    }

    #[test]
    fn non_finite_feature_blocks_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.datb");
        let mut bank = random_bank(1, 3, 2, 2);
        bank.feats[3] = f32::NAN;
        let err = encode_bank_file(&bank, &path).unwrap_err();
        assert!(matches!(err, DatError::Validation(_)));
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_bank(&random_bank(2, 2, 2, 2)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_bank(&bytes), Err(DatError::Format(_))));
    }

    #[test]
    fn bad_version() {
        let mut bytes = encode_bank(&random_bank(2, 2, 2, 2)).unwrap();
        bytes[4] = 9;
        let crc = crc32fast::hash(&bytes[..24]);
        bytes[24..28].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_bank(&bytes),
            Err(DatError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn corrupt_header_detected() {
        let mut bytes = encode_bank(&random_bank(2, 2, 2, 2)).unwrap();
        bytes[9] ^= 0x40;
        let err = decode_bank(&bytes).unwrap_err();
        assert!(err.to_string().contains("corrupt header"), "{err}");
    }

    #[test]
    fn truncation_names_byte_counts() {
        let bytes = encode_bank(&random_bank(3, 8, 4, 4)).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match decode_bank(cut) {
            Err(DatError::Truncated { expected, actual, .. }) => {
                assert_eq!(actual, cut.len() as u64);
                assert!(expected > actual);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let msg = decode_bank(cut).unwrap_err().to_string();
        assert!(msg.contains(&cut.len().to_string()));
    }

    #[test]
    fn norm_two_row_reported() {
        let mut bank = random_bank(4, 4, 2, 3);
        for x in &mut bank.feats[6..9] {
            *x *= 2.0;
        }
        let v = validate_bank(&bank);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("feats[2]"));
        assert!(v[0].contains("2.000000"));
    }

    #[test]
    fn valid_bank_no_violations() {
        assert!(validate_bank(&random_bank(5, 10, 3, 3)).is_empty());
    }

    #[test]
    fn negative_label_reported() {
        let v = validate_labels(&[0, 1, -5, 1], 2);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("labels[2]") && v[0].contains("-5"));

        let mut ds = small_dataset();
        ds.labels[1] = 7;
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("labels[1]"));
    }

    #[test]
    fn dataset_roundtrip_and_checksum() {
        let ds = small_dataset();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        let idx = DATASET_HEADER_LEN + 5;
        bad[idx] ^= 1;
        assert!(matches!(decode_dataset(&bad), Err(DatError::Checksum { .. })));
    }

    #[test]
    fn encoding_is_deterministic() {
        let bank = random_bank(6, 5, 3, 3);
        assert_eq!(encode_bank(&bank).unwrap(), encode_bank(&bank).unwrap());
    }
}
