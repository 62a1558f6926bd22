//! File formats: fvecs features, label lists, model files, packed code files,
//! result and metric CSVs.
//!
//! Binary formats are little-endian throughout.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::index::{EncodedDatabase, SearchHit};
use crate::model::{Model, Projector};
use crate::quantizer::{bits_per_index, Codebook, SubCodebook};
use crate::trainer::EpochMetrics;

pub const MODEL_MAGIC: &[u8; 4] = b"HIPQ";
pub const MODEL_VERSION: u16 = 1;
pub const CODE_MAGIC: &[u8; 4] = b"HIPC";
pub const CODE_VERSION: u16 = 1;
/// magic + version + N (u64) + M, K (u32) + codebook hash (u64).
pub const CODE_HEADER_BYTES: usize = 4 + 2 + 8 + 4 + 4 + 8;

/// Column header of search results.
pub const RESULTS_HEADER: &str = "query_id,rank,item_id,distance";
/// Column header of the training log.
pub const METRICS_HEADER: &str = "epoch,L_aug,L_prot,L_ins,total,mean_quant_error,lr";

// ---- fvecs ---------------------------------------------------------------

/// Parses fvecs bytes: each record is a `u32` dimension followed by that many
/// `f32` values. Returns the dimension (0 for an empty input) and the values.
pub fn parse_fvecs(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    let mut pos = 0usize;
    let mut dim = None;
    let mut values = Vec::new();
    let mut record = 0usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(Error::format(
                pos as u64,
                format!("record {record}: truncated dimension header"),
            ));
        }
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        match dim {
            None if d == 0 => {
                return Err(Error::format(pos as u64, format!("record {record}: dimension 0")));
            }
            None => dim = Some(d),
            Some(first) if first != d => {
                return Err(Error::format(
                    pos as u64,
                    format!("record {record}: dimension {d} differs from the first record's {first}"),
                ));
            }
            Some(_) => {}
        }
        pos += 4;
        let need = 4 * d;
        if bytes.len() - pos < need {
            return Err(Error::format(
                pos as u64,
                format!("record {record}: expected {need} bytes of values, found {}", bytes.len() - pos),
            ));
        }
        values.extend(
            bytes[pos..pos + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
        );
        pos += need;
        record += 1;
    }
    Ok((dim.unwrap_or(0), values))
}

/// Serializes rows of `dim` `f32` values as fvecs records.
pub fn encode_fvecs(dim: usize, values: &[f32]) -> Result<Vec<u8>> {
    if dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!(
            "{} values do not form rows of dimension {dim}",
            values.len()
        )));
    }
    let d = u32::try_from(dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    let mut out = Vec::with_capacity(values.len() / dim * (4 + 4 * dim));
    for row in values.chunks_exact(dim) {
        out.extend_from_slice(&d.to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads an fvecs file; values are widened to `f64` exactly.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let (dim, values) = parse_fvecs(&fs::read(path)?)?;
    FeatureMatrix::new(dim, values.into_iter().map(f64::from).collect())
}

/// Writes an fvecs file; values are narrowed to `f32`, so a matrix read with
/// [`read_features`] round-trips bit-exactly.
pub fn write_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    if features.is_empty() {
        return Err(Error::invalid("refusing to write an empty feature matrix"));
    }
    let values: Vec<f32> = features.as_slice().iter().map(|&v| v as f32).collect();
    write_atomic(path.as_ref(), &encode_fvecs(features.dim(), &values)?)
}

// ---- labels --------------------------------------------------------------

/// One label set per line: comma-separated non-negative integers, blank for
/// none.
pub fn parse_labels(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.trim();
            if line.is_empty() {
                return Ok(Vec::new());
            }
            line.split(',')
                .map(|t| {
                    t.trim().parse::<u32>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("invalid label {:?}", t.trim()),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[Vec<u32>]) -> Result<()> {
    let mut s = String::new();
    for set in labels {
        let parts: Vec<String> = set.iter().map(|l| l.to_string()).collect();
        s.push_str(&parts.join(","));
        s.push('\n');
    }
    write_atomic(path.as_ref(), s.as_bytes())
}

// ---- model file ----------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format(self.pos as u64, format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} exceeds u32")))
}

/// Serializes a model with a free-form text block (typically the training
/// configuration) and a trailing CRC-32.
pub fn model_to_bytes(model: &Model<f64>, config_echo: &str) -> Result<Vec<u8>> {
    let cb = &model.codebook;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for (v, what) in [
        (model.input_dim(), "input dimension"),
        (cb.num_subspaces(), "subspace count"),
        (cb.num_codewords(), "codeword count"),
        (cb.dim(), "subspace dimension"),
    ] {
        out.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    put_f64s(&mut out, &cb.curvatures());
    put_f64s(&mut out, &[cb.tau(), model.clip_norm()]);
    put_f64s(&mut out, model.projector.weights());
    put_f64s(&mut out, model.projector.bias());
    for sub in cb.subs() {
        put_f64s(&mut out, sub.coords());
    }
    out.extend_from_slice(&dim_u32(config_echo.len(), "config block")?.to_le_bytes());
    out.extend_from_slice(config_echo.as_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Inverse of [`model_to_bytes`]; returns the model and the text block.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(Model<f64>, String)> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::format(0, "not a model file (bad magic)"));
    }
    if bytes.len() < 10 {
        return Err(Error::format(bytes.len() as u64, "truncated model file"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            body.len() as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported model version {version}")));
    }
    let d_in = r.u32("input dimension")? as usize;
    let m = r.u32("subspace count")? as usize;
    let k = r.u32("codeword count")? as usize;
    let d = r.u32("subspace dimension")? as usize;
    if m == 0 || d == 0 || d_in == 0 || k < 2 || !k.is_power_of_two() {
        return Err(Error::format(
            6,
            format!("invalid model shape D_in={d_in} M={m} K={k} d={d}"),
        ));
    }
    let curvatures = r.f64s(m, "curvatures")?;
    let tc = r.f64s(2, "temperatures")?;
    let width = m * (d + 1);
    let weights = r.f64s(width * d_in, "projector weights")?;
    let bias = r.f64s(width, "projector bias")?;
    let mut subs = Vec::with_capacity(m);
    for (s, &theta) in curvatures.iter().enumerate() {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::format(r.pos as u64, format!("subspace {s} has invalid curvature {theta}")));
        }
        let at = r.pos as u64;
        let coords = r.f64s(k * (d + 1), "codewords")?;
        let sub = SubCodebook::from_raw(s, theta, d, coords);
        if !sub.all_on_manifold() {
            return Err(Error::format(at, format!("subspace {s} codewords fail the manifold check")));
        }
        subs.push(sub);
    }
    let echo_len = r.u32("config block length")? as usize;
    let echo = r.take(echo_len, "config block")?;
    let echo = String::from_utf8(echo.to_vec())
        .map_err(|_| Error::format((r.pos - echo_len) as u64, "config block is not UTF-8"))?;
    if r.pos != body.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the config block"));
    }
    let codebook = Codebook::new(subs, tc[0]).map_err(|e| Error::format(0, e.to_string()))?;
    let projector = Projector::new(d_in, width, weights, bias)?;
    let model = Model::from_parts(projector, codebook, tc[1]).map_err(|e| Error::format(0, e.to_string()))?;
    Ok((model, echo))
}

pub fn save_model(path: impl AsRef<Path>, model: &Model<f64>, config_echo: &str) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model, config_echo)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model<f64>, String)> {
    model_from_bytes(&fs::read(path)?)
}

// ---- code file -----------------------------------------------------------

/// Packed bytes per item: `⌈M·log₂K / 8⌉`.
pub fn code_bytes_per_item(num_subspaces: usize, num_codewords: usize) -> usize {
    (num_subspaces * bits_per_index(num_codewords)).div_ceil(8)
}

/// Packs one item's indices, least significant bit first.
fn pack_item(code: &[u32], bits: usize, out: &mut [u8]) {
    out.iter_mut().for_each(|b| *b = 0);
    let mut bit = 0usize;
    for &c in code {
        for j in 0..bits {
            if (c >> j) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
}

fn unpack_item(bytes: &[u8], bits: usize, m: usize, out: &mut Vec<u32>) {
    let mut bit = 0usize;
    for _ in 0..m {
        let mut c = 0u32;
        for j in 0..bits {
            if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                c |= 1 << j;
            }
            bit += 1;
        }
        out.push(c);
    }
}

pub fn codes_to_bytes(db: &EncodedDatabase) -> Vec<u8> {
    let (m, k) = (db.num_subspaces(), db.num_codewords());
    let per = code_bytes_per_item(m, k);
    let bits = bits_per_index(k);
    let mut out = Vec::with_capacity(CODE_HEADER_BYTES + per * db.len());
    out.extend_from_slice(CODE_MAGIC);
    out.extend_from_slice(&CODE_VERSION.to_le_bytes());
    out.extend_from_slice(&(db.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&db.codebook_hash().to_le_bytes());
    let mut buf = vec![0u8; per];
    for i in 0..db.len() {
        pack_item(db.code(i), bits, &mut buf);
        out.extend_from_slice(&buf);
    }
    out
}

pub fn codes_from_bytes(bytes: &[u8]) -> Result<EncodedDatabase> {
    if bytes.len() < 4 || &bytes[..4] != CODE_MAGIC {
        return Err(Error::format(0, "not a code file (bad magic)"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != CODE_VERSION {
        return Err(Error::format(4, format!("unsupported code file version {version}")));
    }
    let n = r.u64("item count")?;
    let m = r.u32("subspace count")? as usize;
    let k = r.u32("codeword count")? as usize;
    let hash = r.u64("codebook hash")?;
    if m == 0 || k < 2 || !k.is_power_of_two() {
        return Err(Error::format(14, format!("invalid code shape M={m} K={k}")));
    }
    let per = code_bytes_per_item(m, k);
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(per))
        .ok_or_else(|| Error::format(6, "item count too large"))?;
    let payload = &bytes[CODE_HEADER_BYTES..];
    if payload.len() != expected {
        return Err(Error::format(
            CODE_HEADER_BYTES as u64,
            format!("payload is {} bytes, expected {expected} for {n} items", payload.len()),
        ));
    }
    let bits = bits_per_index(k);
    let mut codes = Vec::with_capacity(n as usize * m);
    for item in payload.chunks_exact(per) {
        unpack_item(item, bits, m, &mut codes);
    }
    EncodedDatabase::new(m, k, hash, codes).map_err(|e| Error::format(CODE_HEADER_BYTES as u64, e.to_string()))
}

pub fn write_codes(path: impl AsRef<Path>, db: &EncodedDatabase) -> Result<()> {
    write_atomic(path.as_ref(), &codes_to_bytes(db))
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<EncodedDatabase> {
    codes_from_bytes(&fs::read(path)?)
}

// ---- CSV outputs ---------------------------------------------------------

/// `query_id,rank,item_id,distance` rows, rank starting at 1.
pub fn results_to_csv(results: &[Vec<SearchHit<f64>>]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for (q, hits) in results.iter().enumerate() {
        for (r, h) in hits.iter().enumerate() {
            let _ = writeln!(s, "{q},{},{},{}", r + 1, h.id, h.distance);
        }
    }
    s
}

pub fn write_results(path: impl AsRef<Path>, results: &[Vec<SearchHit<f64>>]) -> Result<()> {
    write_atomic(path.as_ref(), results_to_csv(results).as_bytes())
}

/// Parses a results CSV into per-query rankings of item ids ordered by rank.
/// Query ids must be `0..Q`; a query with no rows gets an empty ranking.
pub fn parse_results(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut rows: Vec<(usize, usize, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("query_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |message: String| Error::Parse { line: i + 1, message };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |j: usize, name: &str| -> Result<usize> {
            fields[j].parse().map_err(|_| bad(format!("invalid {name} {:?}", fields[j])))
        };
        let (q, rank, item) = (num(0, "query_id")?, num(1, "rank")?, num(2, "item_id")?);
        fields[3]
            .parse::<f64>()
            .map_err(|_| bad(format!("invalid distance {:?}", fields[3])))?;
        rows.push((q, rank, item));
    }
    let queries = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); queries];
    rows.sort_by_key(|&(q, rank, _)| (q, rank));
    for (q, _, item) in rows {
        out[q].push(item);
    }
    Ok(out)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<Vec<usize>>> {
    parse_results(&fs::read_to_string(path)?)
}

pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.epoch, m.loss_aug, m.loss_prot, m.loss_ins, m.loss_total, m.mean_quant_error, m.lr
        );
    }
    s
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = BufWriter::new(fs::File::create(tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::codebook_hash;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fvecs_round_trip_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fvecs");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..100 * 64).map(|_| (rng.random::<f32>() * 10.0 - 5.0) as f64).collect();
        let m = FeatureMatrix::new(64, vals).unwrap();
        write_features(&p, &m).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.rows(), 100);
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(fs::metadata(&p).unwrap().len(), 100 * (4 + 4 * 64));
    }

    #[test]
    fn fvecs_empty_and_errors() {
        assert_eq!(parse_fvecs(&[]).unwrap(), (0, vec![]));
        let mut bytes = encode_fvecs(32, &[0.5; 32]).unwrap();
        bytes.extend(encode_fvecs(64, &[0.5; 64]).unwrap());
        match parse_fvecs(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 4 + 128);
                assert!(message.contains("record 1"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let good = encode_fvecs(4, &[1.0; 8]).unwrap();
        match parse_fvecs(&good[..good.len() - 3]) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 20 + 4);
                assert!(message.contains("record 1"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_fvecs(&good[..2]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn labels() {
        assert_eq!(parse_labels("3\n1,4,7\n\n").unwrap(), vec![vec![3], vec![1, 4, 7], vec![]]);
        assert_eq!(parse_labels("").unwrap(), Vec::<Vec<u32>>::new());
        match parse_labels("1\n2,x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_labels("-1").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        let l = vec![vec![1, 2], vec![], vec![9]];
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
    }

    fn model() -> Model<f64> {
        let mut m = Model::init(6, 2, 8, 3, 1.0, 0.2, 0.5, 7).unwrap();
        m.codebook.subs_mut()[1].set_curvature(0.7);
        m.projector.bias_mut()[3] = 0.25;
        m
    }

    #[test]
    fn model_round_trip() {
        let m = model();
        let bytes = model_to_bytes(&m, "seed=7\n").unwrap();
        let (back, echo) = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(echo, "seed=7\n");
        assert_eq!(model_to_bytes(&back, &echo).unwrap(), bytes);
    }

    #[test]
    fn model_corruption_detected() {
        let bytes = model_to_bytes(&model(), "x=1\n").unwrap();
        for pos in [6, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(model_from_bytes(&bad), Err(Error::Format { .. })), "byte {pos}");
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(model_from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
        // a valid checksum over a wrong version still fails
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        match model_from_bytes(&v2) {
            Err(Error::Format { message, .. }) => assert!(message.contains("version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_manifold_check_on_load() {
        let m = model();
        let mut bytes = model_to_bytes(&m, "").unwrap();
        bytes.truncate(bytes.len() - 4);
        // first codeword's time coordinate sits right after curvatures, temps, W and b
        let off = 6 + 16 + 8 * 2 + 8 * 2 + 8 * (8 * 6) + 8 * 8;
        bytes[off..off + 8].copy_from_slice(&5.0f64.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        match model_from_bytes(&bytes) {
            Err(Error::Format { message, .. }) => assert!(message.contains("manifold"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn code_file_size_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<u32> = (0..1000 * 4).map(|_| rng.random_range(0..256)).collect();
        let db = EncodedDatabase::new(4, 256, 0xdead_beef, codes).unwrap();
        let bytes = codes_to_bytes(&db);
        assert_eq!(bytes.len() - CODE_HEADER_BYTES, 4000);
        assert_eq!(codes_from_bytes(&bytes).unwrap(), db);
        let mut short = bytes.clone();
        short.pop();
        assert!(codes_from_bytes(&short).is_err());
    }

    #[test]
    fn pack_bit_order() {
        // K=8 → 3 bits; indices 5 (101), 3 (011), 7 (111) → bits 101 110 111 (LSB first)
        let mut buf = [0u8; 2];
        pack_item(&[5, 3, 7], 3, &mut buf);
        assert_eq!(buf, [0b1101_1101, 0b0000_0001]);
        let mut out = Vec::new();
        unpack_item(&buf, 3, 3, &mut out);
        assert_eq!(out, vec![5, 3, 7]);
    }

    #[test]
    fn code_file_keeps_hash() {
        let m = model();
        let h = codebook_hash(&m.codebook);
        let db = EncodedDatabase::new(2, 8, h, vec![1, 2, 3, 4]).unwrap();
        let back = codes_from_bytes(&codes_to_bytes(&db)).unwrap();
        assert!(back.check_codebook(&m.codebook).is_ok());
    }

    #[test]
    fn results_round_trip() {
        let res = vec![
            vec![SearchHit { id: 4, distance: 0.5 }, SearchHit { id: 1, distance: 1.25 }],
            vec![],
            vec![SearchHit { id: 0, distance: 3.0 }],
        ];
        let text = results_to_csv(&res);
        assert!(text.starts_with(RESULTS_HEADER));
        let parsed = parse_results(&text).unwrap();
        assert_eq!(parsed, vec![vec![4, 1], vec![], vec![0]]);
        assert!(matches!(parse_results("query_id,rank,item_id,distance\n0,1,x,0.1\n"), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn code_round_trip(seed in 0u64..10_000, m in 1usize..9, kexp in 1u32..11, n in 0usize..40) {
            let k = 1usize << kexp;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<u32> = (0..n * m).map(|_| rng.random_range(0..k as u32)).collect();
            let db = EncodedDatabase::new(m, k, seed, codes).unwrap();
            let bytes = codes_to_bytes(&db);
            prop_assert_eq!(bytes.len(), CODE_HEADER_BYTES + n * (m * kexp as usize).div_ceil(8));
            prop_assert_eq!(codes_from_bytes(&bytes).unwrap(), db);
        }

        #[test]
        fn fvecs_round_trip(seed in 0u64..10_000, n in 1usize..20, d in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f32> = (0..n * d).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
            let (dim, back) = parse_fvecs(&encode_fvecs(d, &vals).unwrap()).unwrap();
            prop_assert_eq!(dim, d);
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
