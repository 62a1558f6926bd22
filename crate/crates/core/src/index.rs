//! Encoded databases, lookup-table (ADC) search, a brute-force reference
//! search, and MAP@N evaluation.

use std::cmp::Ordering;

use sha2::{Digest, Sha256};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geometry::{self, ProductPoint};
use crate::model::Model;
use crate::quantizer::{self, Codebook, QuantCode};
use crate::scalar::{to_f64, Scalar};

/// Hard codes of a database, `N × M` indices, tied to one codebook by hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDatabase {
    num_subspaces: usize,
    num_codewords: usize,
    codebook_hash: u64,
    codes: Vec<u32>,
}

/// Query-to-codeword distances, `M × K`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable<T> {
    num_subspaces: usize,
    num_codewords: usize,
    entries: Vec<T>,
}

/// One ranked result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchHit<T> {
    pub id: usize,
    pub distance: T,
}

/// Work done by a scan, for checking the per-item cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub items: usize,
    pub table_lookups: usize,
    pub additions: usize,
}

/// SHA-256 over the codebook shape, curvatures and codeword coordinates (as
/// little-endian `f64`), truncated to the first 8 bytes.
pub fn codebook_hash<T: Scalar>(cb: &Codebook<T>) -> u64 {
    let mut h = Sha256::new();
    for v in [cb.num_subspaces(), cb.num_codewords(), cb.dim()] {
        h.update((v as u64).to_le_bytes());
    }
    for sub in cb.subs() {
        h.update(to_f64(sub.curvature()).to_le_bytes());
        for &c in sub.coords() {
            h.update(to_f64(c).to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl EncodedDatabase {
    /// Wraps `N × M` indices; every index must be below `num_codewords`.
    pub fn new(num_subspaces: usize, num_codewords: usize, codebook_hash: u64, codes: Vec<u32>) -> Result<Self> {
        if num_subspaces == 0 || !codes.len().is_multiple_of(num_subspaces) {
            return Err(Error::invalid(format!(
                "{} code entries do not split into {num_subspaces} subspaces",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= num_codewords) {
            return Err(Error::invalid(format!("code index {bad} out of range for K={num_codewords}")));
        }
        Ok(EncodedDatabase {
            num_subspaces,
            num_codewords,
            codebook_hash,
            codes,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.num_subspaces
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    pub fn codebook_hash(&self) -> u64 {
        self.codebook_hash
    }

    /// Indices of item `i`.
    pub fn code(&self, i: usize) -> &[u32] {
        &self.codes[i * self.num_subspaces..(i + 1) * self.num_subspaces]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn quant_code(&self, i: usize) -> QuantCode {
        QuantCode::new(self.code(i).to_vec(), self.num_codewords).expect("validated at construction")
    }

    /// Fails unless the database was encoded with `cb`.
    pub fn check_codebook<T: Scalar>(&self, cb: &Codebook<T>) -> Result<()> {
        if cb.num_subspaces() != self.num_subspaces || cb.num_codewords() != self.num_codewords {
            return Err(Error::Consistency(format!(
                "codes are {}x{} but the codebook is {}x{}",
                self.num_subspaces,
                self.num_codewords,
                cb.num_subspaces(),
                cb.num_codewords()
            )));
        }
        let h = codebook_hash(cb);
        if h != self.codebook_hash {
            return Err(Error::Consistency(format!(
                "codes were produced by codebook {:016x}, not {h:016x}",
                self.codebook_hash
            )));
        }
        Ok(())
    }
}

/// Hard-quantizes already embedded points.
pub fn encode_points<T: Scalar>(points: &[ProductPoint<T>], cb: &Codebook<T>) -> Result<EncodedDatabase> {
    let mut codes = Vec::with_capacity(points.len() * cb.num_subspaces());
    for p in points {
        codes.extend_from_slice(quantizer::encode(p, cb)?.indices());
    }
    EncodedDatabase::new(cb.num_subspaces(), cb.num_codewords(), codebook_hash(cb), codes)
}

/// Embeds every row (no augmentation) and hard-quantizes it.
pub fn encode_database(model: &Model<f64>, features: &FeatureMatrix) -> Result<EncodedDatabase> {
    if !features.is_empty() && features.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "features have {} dimensions, model expects {}",
            features.dim(),
            model.input_dim()
        )));
    }
    let cb = &model.codebook;
    let mut codes = Vec::with_capacity(features.rows() * cb.num_subspaces());
    for x in features.iter_rows().take(features.rows()) {
        codes.extend_from_slice(model.encode(x)?.indices());
    }
    EncodedDatabase::new(cb.num_subspaces(), cb.num_codewords(), codebook_hash(cb), codes)
}

impl<T: Scalar> LookupTable<T> {
    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize) -> T {
        self.entries[m * self.num_codewords + k]
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    /// `Σ_m T[m, code[m]]`, accumulated in subspace order.
    #[inline]
    pub fn code_distance(&self, code: &[u32]) -> T {
        let mut acc = self.entries[code[0] as usize];
        for (m, &k) in code.iter().enumerate().skip(1) {
            acc += self.entries[m * self.num_codewords + k as usize];
        }
        acc
    }
}

/// `T[m,k] = d_L(h_q^m, c_k^m)`.
pub fn build_lookup_table<T: Scalar>(query: &ProductPoint<T>, cb: &Codebook<T>) -> Result<LookupTable<T>> {
    if query.num_parts() != cb.num_subspaces() {
        return Err(Error::invalid(format!(
            "query has {} parts, codebook has {} subspaces",
            query.num_parts(),
            cb.num_subspaces()
        )));
    }
    let k = cb.num_codewords();
    let mut entries = Vec::with_capacity(cb.num_subspaces() * k);
    for (part, sub) in query.parts().iter().zip(cb.subs()) {
        if part.dim() != sub.dim() {
            return Err(Error::invalid("query subspace dimension differs from the codebook"));
        }
        for kk in 0..k {
            entries.push(geometry::distance_raw(part.coords(), sub.codeword(kk), sub.curvature()));
        }
    }
    Ok(LookupTable {
        num_subspaces: cb.num_subspaces(),
        num_codewords: k,
        entries,
    })
}

fn rank_order<T: Scalar>(a: &SearchHit<T>, b: &SearchHit<T>) -> Ordering {
    to_f64(a.distance)
        .total_cmp(&to_f64(b.distance))
        .then(a.id.cmp(&b.id))
}

/// Keeps the `top_n` smallest hits sorted by (distance, id).
fn top_n<T: Scalar>(mut hits: Vec<SearchHit<T>>, top_n: usize) -> Vec<SearchHit<T>> {
    if hits.len() > top_n {
        hits.select_nth_unstable_by(top_n - 1, rank_order);
        hits.truncate(top_n);
    }
    hits.sort_by(rank_order);
    hits
}

fn check_top_n(top_n: usize) -> Result<()> {
    if top_n == 0 {
        Err(Error::invalid("topN must be at least 1"))
    } else {
        Ok(())
    }
}

/// Asymmetric-distance scan: one table lookup per subspace per item.
pub fn adc_search<T: Scalar>(table: &LookupTable<T>, db: &EncodedDatabase, top: usize) -> Result<Vec<SearchHit<T>>> {
    adc_search_with_stats(table, db, top).map(|(h, _)| h)
}

/// [`adc_search`] that also reports the work done.
pub fn adc_search_with_stats<T: Scalar>(
    table: &LookupTable<T>,
    db: &EncodedDatabase,
    top: usize,
) -> Result<(Vec<SearchHit<T>>, ScanStats)> {
    check_top_n(top)?;
    if table.num_subspaces != db.num_subspaces || table.num_codewords != db.num_codewords {
        return Err(Error::invalid("lookup table shape differs from the database"));
    }
    let m = db.num_subspaces;
    let hits: Vec<SearchHit<T>> = (0..db.len())
        .map(|i| SearchHit {
            id: i,
            distance: table.code_distance(db.code(i)),
        })
        .collect();
    let stats = ScanStats {
        items: db.len(),
        table_lookups: db.len() * m,
        additions: db.len() * (m - 1),
    };
    Ok((top_n(hits, top), stats))
}

/// Reference search: decodes every item and evaluates the product distance
/// directly.
pub fn brute_force_search<T: Scalar>(
    query: &ProductPoint<T>,
    db: &EncodedDatabase,
    cb: &Codebook<T>,
    top: usize,
) -> Result<Vec<SearchHit<T>>> {
    check_top_n(top)?;
    let mut hits = Vec::with_capacity(db.len());
    for i in 0..db.len() {
        let decoded = quantizer::decode(&db.quant_code(i), cb)?;
        let mut parts = query.parts().iter().zip(decoded.parts());
        let (q0, c0) = parts.next().expect("at least one subspace");
        let mut acc = geometry::lorentz_distance(q0, c0)?;
        for (q, c) in parts {
            acc += geometry::lorentz_distance(q, c)?;
        }
        hits.push(SearchHit { id: i, distance: acc });
    }
    Ok(top_n(hits, top))
}

/// Average precision over the top `n` ids of one ranking. Relevance means
/// sharing at least one label with the query.
pub fn average_precision(ranking: &[usize], query_labels: &[u32], db_labels: &[Vec<u32>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (k, &id) in ranking.iter().take(n).enumerate() {
        let labels = db_labels.get(id).ok_or_else(|| {
            Error::Consistency(format!("ranked item {id} has no label entry"))
        })?;
        if labels.iter().any(|l| query_labels.contains(l)) {
            found += 1;
            sum += found as f64 / (k + 1) as f64;
        }
    }
    Ok(if found == 0 { 0.0 } else { sum / found as f64 })
}

/// Mean of [`average_precision`] over queries. An empty query set gives 0.
pub fn map_at_n(
    rankings: &[Vec<usize>],
    query_labels: &[Vec<u32>],
    db_labels: &[Vec<u32>],
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    if rankings.len() != query_labels.len() {
        return Err(Error::invalid(format!(
            "{} rankings but {} query label sets",
            rankings.len(),
            query_labels.len()
        )));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, q) in rankings.iter().zip(query_labels) {
        total += average_precision(r, q, db_labels, n)?;
    }
    Ok(total / rankings.len() as f64)
}
