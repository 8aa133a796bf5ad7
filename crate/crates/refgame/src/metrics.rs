//! Language and attention analysis: topographic similarity, distribution
//! divergences, attention discrepancy, and symbol-concept association.

use std::f64::consts::LN_2;

use crate::agents::{AttentionRecord, Message};
use crate::error::{Error, Result};
use crate::world::{ObjectInstance, ObjectType};
use crate::Real;

/// Upper bound of the Jensen-Shannon divergence under natural log.
pub const JSD_MAX: Real = LN_2;

const PROB_SUM_TOL: Real = 1e-6;

/// Unit-cost edit distance between symbol sequences.
pub fn levenshtein(a: &[u16], b: &[u16]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// 1 - cos(angle). Zero vectors have no direction and are rejected.
pub fn cosine_distance(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine distance between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: Real = a.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nb: Real = b.iter().map(|x| x * x).sum::<Real>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine distance of a zero vector".into()));
    }
    Ok(1.0 - dot / (na * nb))
}

/// Ranks with ties averaged, 1-based.
fn average_ranks(xs: &[Real]) -> Vec<Real> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("comparable values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as Real / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[Real], ys: &[Real]) -> Result<Real> {
    let n = xs.len() as Real;
    let mx = xs.iter().sum::<Real>() / n;
    let my = ys.iter().sum::<Real>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric {
            op: "spearman",
            detail: "correlation of a constant sequence is undefined".into(),
        });
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Spearman's rank correlation with tie-averaged ranks.
pub fn spearman(xs: &[Real], ys: &[Real]) -> Result<Real> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract(format!(
            "rank correlation needs two equal-length lists of >= 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            op: "spearman",
            detail: "non-finite input".into(),
        });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One greedy message per object type, over a declared value universe.
#[derive(Debug, Clone)]
pub struct LanguageTable {
    total_values: usize,
    entries: Vec<(ObjectType, Message)>,
}

impl LanguageTable {
    pub fn new(total_values: usize) -> Self {
        LanguageTable { total_values, entries: Vec::new() }
    }

    pub fn push(&mut self, ty: ObjectType, msg: Message) -> Result<()> {
        if self.entries.iter().any(|(t, _)| *t == ty) {
            return Err(Error::Contract(format!(
                "duplicate language entry for type {}",
                ty.label()
            )));
        }
        self.entries.push((ty, msg));
        Ok(())
    }

    pub fn entries(&self) -> &[(ObjectType, Message)] {
        &self.entries
    }

    pub fn total_values(&self) -> usize {
        self.total_values
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unordered pairs evaluated by [`topsim`].
    pub fn pair_count(&self) -> usize {
        self.entries.len() * (self.entries.len().saturating_sub(1)) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopSimStatus {
    Correlation(Real),
    /// Message distances carry no signal (e.g. every message identical).
    Degenerate,
}

impl TopSimStatus {
    pub fn value(&self) -> Option<Real> {
        match self {
            TopSimStatus::Correlation(r) => Some(*r),
            TopSimStatus::Degenerate => None,
        }
    }
}

/// Pairwise (object cosine distance, message edit distance) lists over all
/// unordered type pairs.
pub fn pairwise_distances(table: &LanguageTable) -> Result<(Vec<Real>, Vec<Real>)> {
    let n = table.entries.len();
    let mut obj = Vec::with_capacity(n * (n - 1) / 2);
    let mut msg = Vec::with_capacity(n * (n - 1) / 2);
    let vecs: Vec<Vec<Real>> = table
        .entries
        .iter()
        .map(|(t, _)| t.binary_vector(table.total_values))
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            obj.push(cosine_distance(&vecs[i], &vecs[j])?);
            msg.push(levenshtein(
                table.entries[i].1.symbols(),
                table.entries[j].1.symbols(),
            ) as Real);
        }
    }
    Ok((obj, msg))
}

/// Topographic similarity: Spearman correlation between pairwise object
/// distances and pairwise message distances.
pub fn topsim(table: &LanguageTable) -> Result<TopSimStatus> {
    if table.len() < 3 {
        return Err(Error::Contract(format!(
            "topographic similarity needs >= 3 object types, got {}",
            table.len()
        )));
    }
    let (obj, msg) = pairwise_distances(table)?;
    if msg.iter().all(|&d| d == msg[0]) {
        return Ok(TopSimStatus::Degenerate);
    }
    spearman(&obj, &msg).map(TopSimStatus::Correlation)
}

/// Jensen-Shannon divergence with natural log; 0 * log 0 counts as 0.
pub fn jsd(p: &[Real], q: &[Real]) -> Result<Real> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "divergence between lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("first", p), ("second", q)] {
        if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Contract(format!(
                "{name} argument is not a probability vector"
            )));
        }
        let sum: Real = v.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Contract(format!(
                "{name} argument sums to {sum}, expected 1"
            )));
        }
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Mean per-symbol JSD between two attention records over the same object.
pub fn attention_discrepancy(
    speaker: &AttentionRecord,
    listener: &AttentionRecord,
) -> Result<Real> {
    if speaker.steps() != listener.steps()
        || speaker.steps() == 0
        || speaker.width() != listener.width()
    {
        return Err(Error::Contract(format!(
            "attention records of {}x{} and {}x{} are not comparable",
            speaker.steps(),
            speaker.width(),
            listener.steps(),
            listener.width()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in speaker.rows.iter().zip(&listener.rows) {
        acc += jsd(a, b)?;
    }
    Ok(acc / speaker.steps() as Real)
}

/// One analysis episode's discrepancy, tagged with the round outcome.
#[derive(Debug, Clone, Copy)]
pub struct DiscrepancySample {
    pub episode: usize,
    pub success: bool,
    pub discrepancy: Real,
}

/// Two-sample Kolmogorov-Smirnov statistic with asymptotic p-value.
#[derive(Debug, Clone, Copy)]
pub struct KsTest {
    pub d: Real,
    pub p: Real,
}

pub fn ks_statistic(a: &[Real], b: &[Real]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("distribution test on an empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("comparable samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("comparable samples"));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: Real = 0.0;
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] == x {
            i += 1;
        }
        while j < nb && sb[j] == x {
            j += 1;
        }
        let diff = (i as Real / na as Real - j as Real / nb as Real).abs();
        d = d.max(diff);
    }
    // Remaining tail of either sample only shrinks one CDF toward 1 while
    // the other is already 1, so the supremum is settled.
    let ne = (na as Real * nb as Real) / (na + nb) as Real;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsTest { d, p: ks_tail(lambda) })
}

/// Asymptotic tail probability Q(lambda) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lambda^2).
fn ks_tail(lambda: Real) -> Real {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as Real * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-12 {
            return (2.0 * sum).clamp(0.0, 1.0);
        }
        sign = -sign;
    }
    // The series converges slowly only for tiny lambda, where p is 1 anyway.
    1.0
}

/// Counts of (symbol, attribute value) co-occurrences plus an unfocused
/// bucket per symbol.
#[derive(Debug, Clone)]
pub struct AssociationMatrix {
    vocab: usize,
    concepts: usize,
    counts: Vec<u64>,
}

impl AssociationMatrix {
    pub fn new(vocab: usize, concepts: usize) -> Self {
        AssociationMatrix { vocab, concepts, counts: vec![0; vocab * (concepts + 1)] }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn count(&self, symbol: u16, concept: usize) -> u64 {
        assert!(concept < self.concepts);
        self.counts[usize::from(symbol) * (self.concepts + 1) + concept]
    }

    pub fn unfocused(&self, symbol: u16) -> u64 {
        self.counts[usize::from(symbol) * (self.concepts + 1) + self.concepts]
    }

    pub fn row_sum(&self, symbol: u16) -> u64 {
        let w = self.concepts + 1;
        self.counts[usize::from(symbol) * w..(usize::from(symbol) + 1) * w]
            .iter()
            .sum()
    }

    fn bump(&mut self, symbol: u16, col: usize) {
        self.counts[usize::from(symbol) * (self.concepts + 1) + col] += 1;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("symbol");
        for c in 0..self.concepts {
            out.push_str(&format!(",value_{c}"));
        }
        out.push_str(",unfocused\n");
        for s in 0..self.vocab {
            out.push_str(&s.to_string());
            for c in 0..=self.concepts {
                out.push_str(&format!(",{}", self.counts[s * (self.concepts + 1) + c]));
            }
            out.push('\n');
        }
        out
    }
}

/// One episode's worth of evidence for the association map.
pub struct EpisodeTrace<'a> {
    pub message: &'a Message,
    pub attention: &'a AttentionRecord,
    pub instance: &'a ObjectInstance,
}

/// Weighted mean (row, col) of an attention row over the patch grid.
pub fn attention_center(row: &[Real], grid_h: usize, grid_w: usize) -> Result<(Real, Real)> {
    if row.len() != grid_h * grid_w {
        return Err(Error::Contract(format!(
            "attention row of {} weights over a {grid_h}x{grid_w} grid",
            row.len()
        )));
    }
    let mut r = 0.0;
    let mut c = 0.0;
    for (i, &w) in row.iter().enumerate() {
        r += w * (i / grid_w) as Real;
        c += w * (i % grid_w) as Real;
    }
    Ok((r, c))
}

/// Smallest axis-aligned box of unit cells covering the given patch indices:
/// [min - 0.5, max + 0.5] on each axis.
fn region_of(slots: &[usize], grid_w: usize) -> Option<((Real, Real), (Real, Real))> {
    let mut rows = slots.iter().map(|&s| s / grid_w);
    let first = rows.next()?;
    let (mut r_lo, mut r_hi) = (first, first);
    for r in rows {
        r_lo = r_lo.min(r);
        r_hi = r_hi.max(r);
    }
    let mut cols = slots.iter().map(|&s| s % grid_w);
    let first = cols.next()?;
    let (mut c_lo, mut c_hi) = (first, first);
    for c in cols {
        c_lo = c_lo.min(c);
        c_hi = c_hi.max(c);
    }
    Some((
        (r_lo as Real - 0.5, r_hi as Real + 0.5),
        (c_lo as Real - 0.5, c_hi as Real + 0.5),
    ))
}

/// For each symbol occurrence, attribute the attention's center of gravity
/// to the unique attribute region containing it, or to the unfocused bucket.
pub fn symbol_concept_map(
    traces: &[EpisodeTrace<'_>],
    vocab: usize,
    total_values: usize,
) -> Result<AssociationMatrix> {
    let mut matrix = AssociationMatrix::new(vocab, total_values);
    for trace in traces {
        let inst = trace.instance;
        if trace.message.len() != trace.attention.steps() {
            return Err(Error::Contract(format!(
                "message of {} symbols with {} attention rows",
                trace.message.len(),
                trace.attention.steps()
            )));
        }
        for (t, &sym) in trace.message.symbols().iter().enumerate() {
            if usize::from(sym) >= vocab {
                return Err(Error::Contract(format!(
                    "symbol id {sym} outside vocabulary of {vocab}"
                )));
            }
            let row = &trace.attention.rows[t];
            let (r, c) = attention_center(row, inst.grid_h, inst.grid_w)?;
            let mut hit: Option<usize> = None;
            let mut unique = true;
            for (value, slots) in &inst.locations {
                if *value >= total_values {
                    return Err(Error::Contract(format!(
                        "attribute value {value} outside universe of {total_values}"
                    )));
                }
                let Some(((r_lo, r_hi), (c_lo, c_hi))) = region_of(slots, inst.grid_w) else {
                    continue;
                };
                if r >= r_lo && r <= r_hi && c >= c_lo && c <= c_hi {
                    if hit.is_some() {
                        unique = false;
                        break;
                    }
                    hit = Some(*value);
                }
            }
            match (hit, unique) {
                (Some(value), true) => matrix.bump(sym, value),
                _ => matrix.bump(sym, total_values),
            }
        }
    }
    Ok(matrix)
}
