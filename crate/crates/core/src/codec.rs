//! Systematic MDS cross-object code over GF(256).
//!
//! Each of the `k` objects is a whole value of `value_len` bytes; server `i`
//! stores the byte-wise combination `sum_o generator[i][o] * value[o]`. The
//! first `k` generator rows form the identity, so servers `0..k` hold one
//! object each verbatim. Parity rows are a Cauchy matrix, which makes every
//! `k x k` submatrix of the stacked generator invertible.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::gf256::{mul_add_into, Gf256};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid code parameters n={n}, k={k}: {reason}")]
    InvalidParams { n: usize, k: usize, reason: &'static str },
    #[error("value length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("expected {expected} object values, got {actual}")]
    WrongValueCount { expected: usize, actual: usize },
    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },
    #[error("servers {servers:?} are not a recovery set for object {object}")]
    NotARecoverySet { object: usize, servers: Vec<usize> },
}

/// Parameters and generator matrix of the cross-object code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSpec {
    n_servers: usize,
    k_objects: usize,
    value_len: usize,
    generator: Vec<Vec<Gf256>>,
}

/// Builds the systematic code: identity rows followed by Cauchy parity rows
/// `1 / (x_i + y_j)` with `y_j = j` and `x_i = k + i`.
pub fn make_code(n: usize, k: usize, value_len: usize) -> Result<CodeSpec, CodecError> {
    if k == 0 {
        return Err(CodecError::InvalidParams { n, k, reason: "k must be at least 1" });
    }
    if k > n {
        return Err(CodecError::InvalidParams { n, k, reason: "k must not exceed n" });
    }
    if n > 255 {
        return Err(CodecError::InvalidParams { n, k, reason: "n must not exceed 255" });
    }
    let mut generator = Vec::with_capacity(n);
    for row in 0..k {
        let mut r = vec![Gf256::ZERO; k];
        r[row] = Gf256::ONE;
        generator.push(r);
    }
    for i in 0..(n - k) {
        let x = Gf256((k + i) as u8);
        let row = (0..k)
            .map(|j| {
                let sum = x + Gf256(j as u8);
                sum.inverse().expect("cauchy points are distinct")
            })
            .collect();
        generator.push(row);
    }
    Ok(CodeSpec { n_servers: n, k_objects: k, value_len, generator })
}

impl CodeSpec {
    /// Builds a spec from an explicit generator. The matrix must be `n x k`;
    /// nothing else is validated, so non-MDS codes are representable.
    pub fn from_generator(generator: Vec<Vec<Gf256>>, value_len: usize) -> Result<Self, CodecError> {
        let n = generator.len();
        let k = generator.first().map_or(0, Vec::len);
        if k == 0 || generator.iter().any(|r| r.len() != k) {
            return Err(CodecError::InvalidParams {
                n,
                k,
                reason: "generator rows must be non-empty and equal length",
            });
        }
        if n > 255 {
            return Err(CodecError::InvalidParams { n, k, reason: "n must not exceed 255" });
        }
        Ok(CodeSpec { n_servers: n, k_objects: k, value_len, generator })
    }

    pub fn n(&self) -> usize {
        self.n_servers
    }

    pub fn k(&self) -> usize {
        self.k_objects
    }

    pub fn value_len(&self) -> usize {
        self.value_len
    }

    pub fn generator(&self) -> &[Vec<Gf256>] {
        &self.generator
    }

    pub fn coefficient(&self, server: usize, object: usize) -> Gf256 {
        self.generator[server][object]
    }

    /// Whether the server's symbol depends on `object`.
    pub fn supports(&self, server: usize, object: usize) -> bool {
        !self.generator[server][object].is_zero()
    }

    /// The server whose generator row is the unit vector for `object`, if any.
    pub fn systematic_server(&self, object: usize) -> Option<usize> {
        self.generator.iter().position(|row| {
            row.iter().enumerate().all(|(o, c)| if o == object { *c == Gf256::ONE } else { c.is_zero() })
        })
    }

    /// The object stored verbatim by `server`, if its row is a unit vector.
    pub fn systematic_object(&self, server: usize) -> Option<usize> {
        let row = &self.generator[server];
        let mut found = None;
        for (o, c) in row.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            if *c != Gf256::ONE || found.is_some() {
                return None;
            }
            found = Some(o);
        }
        found
    }
}

/// Payload of `server` for the given object values.
pub fn encode_symbol(spec: &CodeSpec, server: usize, values: &[&[u8]]) -> Result<Vec<u8>, CodecError> {
    if server >= spec.n() {
        return Err(CodecError::OutOfRange { index: server, limit: spec.n() });
    }
    if values.len() != spec.k() {
        return Err(CodecError::WrongValueCount { expected: spec.k(), actual: values.len() });
    }
    for v in values {
        if v.len() != spec.value_len() {
            return Err(CodecError::LengthMismatch { expected: spec.value_len(), actual: v.len() });
        }
    }
    if let Some(o) = spec.systematic_object(server) {
        return Ok(values[o].to_vec());
    }
    let mut out = vec![0u8; spec.value_len()];
    for (o, v) in values.iter().enumerate() {
        mul_add_into(&mut out, spec.coefficient(server, o), v);
    }
    Ok(out)
}

/// Coefficients `c` with `sum_r c[r] * generator[rows[r]] = e_object`, if the
/// unit vector lies in the span of the selected rows.
fn combination_for(spec: &CodeSpec, object: usize, rows: &[usize]) -> Option<Vec<Gf256>> {
    let k = spec.k();
    let m = rows.len();
    // Augmented system A c = e_object with A = G_rows^T (k x m).
    let mut a: Vec<Vec<Gf256>> = (0..k)
        .map(|col| {
            let mut eq: Vec<Gf256> = rows.iter().map(|&r| spec.coefficient(r, col)).collect();
            eq.push(if col == object { Gf256::ONE } else { Gf256::ZERO });
            eq
        })
        .collect();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..m {
        let Some(p) = (row..k).find(|&i| !a[i][col].is_zero()) else { continue };
        a.swap(row, p);
        let inv = a[row][col].inverse().expect("pivot is nonzero");
        for x in a[row].iter_mut() {
            *x *= inv;
        }
        for i in 0..k {
            if i != row && !a[i][col].is_zero() {
                let f = a[i][col];
                let pivot = a[row].clone();
                for (x, p) in a[i].iter_mut().zip(pivot) {
                    *x += f * p;
                }
            }
        }
        pivots.push(col);
        row += 1;
        if row == k {
            break;
        }
    }
    if a[row..].iter().any(|eq| !eq[m].is_zero()) {
        return None;
    }
    let mut c = vec![Gf256::ZERO; m];
    for (i, &col) in pivots.iter().enumerate() {
        c[col] = a[i][m];
    }
    Some(c)
}

/// Whether `object` is determined by the symbols of `servers`.
pub fn can_decode(spec: &CodeSpec, object: usize, servers: &[usize]) -> bool {
    combination_for(spec, object, servers).is_some()
}

/// A minimal server set whose symbols determine one object.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecoverySet {
    pub object: usize,
    pub servers: BTreeSet<usize>,
}

/// All minimal recovery sets for `object`, by exhaustive subset search in
/// order of increasing size. Exponential in `n`; intended for small codes.
pub fn recovery_sets(spec: &CodeSpec, object: usize) -> Result<Vec<RecoverySet>, CodecError> {
    if object >= spec.k() {
        return Err(CodecError::OutOfRange { index: object, limit: spec.k() });
    }
    let n = spec.n();
    let mut found: Vec<BTreeSet<usize>> = Vec::new();
    for size in 1..=n {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let set: BTreeSet<usize> = combo.iter().copied().collect();
            let has_subset = found.iter().any(|f| f.is_subset(&set));
            if !has_subset && can_decode(spec, object, &combo) {
                found.push(set);
            }
            // next combination in lexicographic order
            let mut i = size;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if combo[i] < n - size + i {
                    combo[i] += 1;
                    for j in i + 1..size {
                        combo[j] = combo[j - 1] + 1;
                    }
                    i = usize::MAX;
                    break;
                }
            }
            if i != usize::MAX {
                break;
            }
        }
    }
    Ok(found.into_iter().map(|servers| RecoverySet { object, servers }).collect())
}

/// Recovers `object` from the payloads of the keyed servers.
pub fn decode(spec: &CodeSpec, object: usize, symbols: &BTreeMap<usize, Vec<u8>>) -> Result<Vec<u8>, CodecError> {
    if object >= spec.k() {
        return Err(CodecError::OutOfRange { index: object, limit: spec.k() });
    }
    for (&s, p) in symbols {
        if s >= spec.n() {
            return Err(CodecError::OutOfRange { index: s, limit: spec.n() });
        }
        if p.len() != spec.value_len() {
            return Err(CodecError::LengthMismatch { expected: spec.value_len(), actual: p.len() });
        }
    }
    let rows: Vec<usize> = symbols.keys().copied().collect();
    let coeffs = combination_for(spec, object, &rows)
        .ok_or_else(|| CodecError::NotARecoverySet { object, servers: rows.clone() })?;
    let mut out = vec![0u8; spec.value_len()];
    for (row, c) in rows.iter().zip(coeffs) {
        mul_add_into(&mut out, c, &symbols[row]);
    }
    Ok(out)
}

/// A code bundled with its precomputed recovery sets, shared by every
/// server of one deployment.
#[derive(Debug, Clone)]
pub struct Codebook {
    spec: CodeSpec,
    recovery: Vec<Vec<RecoverySet>>,
    systematic: Vec<Option<usize>>,
}

impl Codebook {
    pub fn new(spec: CodeSpec) -> Result<Self, CodecError> {
        let recovery = (0..spec.k()).map(|o| recovery_sets(&spec, o)).collect::<Result<Vec<_>, _>>()?;
        let systematic = (0..spec.k()).map(|o| spec.systematic_server(o)).collect();
        Ok(Codebook { spec, recovery, systematic })
    }

    pub fn spec(&self) -> &CodeSpec {
        &self.spec
    }

    pub fn recovery_sets(&self, object: usize) -> &[RecoverySet] {
        &self.recovery[object]
    }

    pub fn systematic_server(&self, object: usize) -> Option<usize> {
        self.systematic[object]
    }

    /// True if some recovery set of `object` lies entirely within `alive`.
    pub fn has_live_recovery_set(&self, object: usize, alive: &BTreeSet<usize>) -> bool {
        self.recovery[object].iter().any(|r| r.servers.is_subset(alive))
    }
}

/// Counts from [`self_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfCheck {
    pub subsets: usize,
    pub round_trips: usize,
}

/// Checks that every `k`-subset of servers determines every object and
/// that `rounds` random value sets round-trip through every recovery set.
pub fn self_check(n: usize, k: usize, value_len: usize, rounds: usize, seed: u64) -> Result<SelfCheck, String> {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = make_code(n, k, value_len).map_err(|e| e.to_string())?;
    let book = Codebook::new(spec).map_err(|e| e.to_string())?;
    let spec = book.spec();
    let mut subsets = 0;
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        for o in 0..k {
            if !can_decode(spec, o, &combo) {
                return Err(format!("({n},{k}): servers {combo:?} do not determine o{o}"));
            }
        }
        subsets += 1;
        let Some(i) = (0..k).rev().find(|&i| combo[i] < n - k + i) else { break };
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
    let mut round_trips = 0;
    for o in 0..k {
        for rs in book.recovery_sets(o) {
            for _ in 0..rounds {
                let values: Vec<Vec<u8>> = (0..k)
                    .map(|_| {
                        let mut v = vec![0u8; value_len];
                        rng.fill_bytes(&mut v);
                        v
                    })
                    .collect();
                let refs: Vec<&[u8]> = values.iter().map(Vec::as_slice).collect();
                let symbols = rs
                    .servers
                    .iter()
                    .map(|&s| encode_symbol(spec, s, &refs).map(|p| (s, p)))
                    .collect::<Result<BTreeMap<_, _>, _>>()
                    .map_err(|e| e.to_string())?;
                let got = decode(spec, o, &symbols).map_err(|e| e.to_string())?;
                if got != values[o] {
                    return Err(format!("({n},{k}): o{o} via {:?} decoded wrongly", rs.servers));
                }
                round_trips += 1;
            }
        }
    }
    Ok(SelfCheck { subsets, round_trips })
}
