use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{FashionRecord, RawImage};
use crate::error::{bail, Result};
use crate::graph::{Graph, Mat};
use crate::model::{ModelView, Side};
use crate::objectives::UNIT_TOL;
use crate::taxonomy::{map_category, CategoryTable};
use crate::textpipe::{build_pretrain_sequence, layout_sequence, TokenSequence, Vocabulary};

/// Records encoded per forward pass when building an index.
const ENCODE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image query, text candidates.
    I2T,
    /// Text query, image candidates.
    T2I,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::I2T, Direction::T2I];

    pub fn name(self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }
}

/// Projected, unit-norm global features of a set of items.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    text: Mat,
    image: Mat,
}

fn check_unit_rows(m: &Mat, what: &str) -> Result<()> {
    for (r, row) in m.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            bail!(InvalidInput, "{what} feature {r} has norm {n}");
        }
    }
    Ok(())
}

impl RetrievalIndex {
    pub fn new(ids: Vec<String>, text: Mat, image: Mat) -> Result<Self> {
        if ids.len() != text.nrows() || ids.len() != image.nrows() || text.ncols() != image.ncols() {
            bail!(
                InvalidInput,
                "index of {} ids with {:?} text and {:?} image features",
                ids.len(),
                text.dim(),
                image.dim()
            );
        }
        check_unit_rows(&text, "text")?;
        check_unit_rows(&image, "image")?;
        Ok(Self { ids, text, image })
    }

    /// Encodes `[CLS] caption` and the image of each record; no symbol token is inserted.
    pub fn build(
        view: ModelView<'_>,
        records: &[FashionRecord],
        images: &[RawImage],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        Self::build_with_symbols(view, records, images, vocab, None)
    }

    /// As [`RetrievalIndex::build`]; with a category table the texts are laid out as in
    /// pre-training, `[CLS] [SYMBOL] caption`.
    pub fn build_with_symbols(
        view: ModelView<'_>,
        records: &[FashionRecord],
        images: &[RawImage],
        vocab: &Vocabulary,
        table: Option<&CategoryTable>,
    ) -> Result<Self> {
        if records.len() != images.len() {
            bail!(InvalidInput, "{} records but {} images", records.len(), images.len());
        }
        let d = view.cfg.d;
        let mut text = Mat::zeros((records.len(), d));
        let mut image = Mat::zeros((records.len(), d));
        for (c, chunk) in records.chunks(ENCODE_CHUNK).enumerate() {
            let seqs = match table {
                Some(t) => chunk
                    .iter()
                    .map(|r| build_pretrain_sequence(&r.caption, map_category(&r.category, t)?, None, vocab, view.cfg.max_text_len))
                    .collect::<Result<Vec<_>>>()?,
                None => caption_sequences(chunk, vocab, view.cfg.max_text_len)?,
            };
            let imgs: Vec<&RawImage> = images[c * ENCODE_CHUNK..c * ENCODE_CHUNK + chunk.len()].iter().collect();
            let (t, i) = encode_global(view, &seqs, &imgs)?;
            let at = c * ENCODE_CHUNK;
            text.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&t);
            image.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&i);
        }
        Self::new(records.iter().map(|r| r.item_id.clone()).collect(), text, image)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn text(&self) -> &Mat {
        &self.text
    }

    pub fn image(&self) -> &Mat {
        &self.image
    }

    fn queries(&self, dir: Direction) -> &Mat {
        match dir {
            Direction::I2T => &self.image,
            Direction::T2I => &self.text,
        }
    }

    fn candidates(&self, dir: Direction) -> &Mat {
        match dir {
            Direction::I2T => &self.text,
            Direction::T2I => &self.image,
        }
    }
}

/// `[CLS] caption` sequences padded to `max_len`.
pub fn caption_sequences(records: &[FashionRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    records
        .iter()
        .map(|r| Ok(layout_sequence(&r.caption, None, None, vocab, max_len)?.seq))
        .collect()
}

/// Projected global text (`[CLS]`) and image features, no gradients.
pub fn encode_global(view: ModelView<'_>, seqs: &[TokenSequence], images: &[&RawImage]) -> Result<(Mat, Mat)> {
    let mut g = Graph::frozen();
    let t = view.text_features(&mut g, seqs)?;
    let i = view.encode_image(&mut g, images)?;
    let cls = t.position(&mut g, 0);
    let img = i.position(&mut g, 0);
    let pt = view.project(&mut g, cls, Side::Text);
    let pi = view.project(&mut g, img, Side::Image);
    Ok((g.value(pt).clone(), g.value(pi).clone()))
}

/// Descending score, then ascending id.
fn ranked_order(scores: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => ids[a].cmp(ids[b]),
        o => o,
    });
    order
}

/// Candidate ids of the opposite modality sorted by descending cosine similarity to `query`.
/// Ties are broken by ascending item id.
pub fn rank<'a>(query: ArrayView1<'_, f64>, index: &'a RetrievalIndex, direction: Direction) -> Result<Vec<&'a str>> {
    if index.is_empty() {
        bail!(InvalidInput, "cannot rank against an empty index");
    }
    let cand = index.candidates(direction);
    if query.len() != cand.ncols() {
        bail!(InvalidInput, "query of dimension {} against {}-dim features", query.len(), cand.ncols());
    }
    let qn = query.dot(&query).sqrt().max(crate::model::NORM_EPS);
    let scores: Vec<f64> = cand.axis_iter(Axis(0)).map(|c| c.dot(&query) / qn).collect();
    let ids: Vec<&str> = index.ids.iter().map(String::as_str).collect();
    Ok(ranked_order(&scores, &ids).into_iter().map(|j| ids[j]).collect())
}

/// Zero-based rank of candidate `pos` among `scores` under the descending-score, ascending-id order.
pub fn rank_of(scores: &[f64], ids: &[&str], pos: usize) -> usize {
    let (sp, ip) = (scores[pos], ids[pos]);
    scores
        .iter()
        .zip(ids)
        .enumerate()
        .filter(|&(j, (&s, &id))| j != pos && (s > sp || (s == sp && id < ip)))
        .count()
}

/// Fraction of rows whose positive column ranks within the top `k`, for each `k`.
/// Columns are ordered by ascending candidate id for tie-breaking.
pub fn recall_at_k(sims: &Mat, positives: &[usize], ks: &[usize]) -> Vec<f64> {
    let ids: Vec<String> = (0..sims.ncols()).map(|j| format!("{j:012}")).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let ranks: Vec<usize> = sims
        .axis_iter(Axis(0))
        .zip(positives)
        .map(|(row, &p)| rank_of(row.as_slice().expect("standard layout"), &ids, p))
        .collect();
    recall_from_ranks(&ranks, ks)
}

fn recall_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            if ranks.is_empty() {
                0.0
            } else {
                ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
            }
        })
        .collect()
}

/// Query count, negatives per query, number of seeded draws and reported cut-offs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_queries: usize,
    pub n_negatives: usize,
    pub n_sets: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ProtocolConfig {
    pub fn desk() -> Self {
        Self {
            n_queries: 100,
            n_negatives: 7,
            n_sets: 5,
            seed: 0,
            ks: vec![1, 5, 10],
        }
    }

    /// 1k queries against 1 positive and 100 same-subcategory negatives, five draws.
    pub fn full_scale() -> Self {
        Self {
            n_queries: 1000,
            n_negatives: 100,
            ..Self::desk()
        }
    }
}

/// Recall per direction and cut-off.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
    /// Queries evaluated per direction, summed over sets.
    pub queries: usize,
}

impl RetrievalReport {
    pub fn recall(&self, dir: Direction, k: usize) -> Option<f64> {
        let at = self.ks.iter().position(|&x| x == k)?;
        Some(match dir {
            Direction::I2T => self.i2t[at],
            Direction::T2I => self.t2i[at],
        })
    }

    /// Mean of the two R@1 values.
    pub fn mean_r1(&self) -> Option<f64> {
        Some((self.recall(Direction::I2T, 1)? + self.recall(Direction::T2I, 1)?) / 2.0)
    }

    /// `{"i2t":{"R@1":..},"t2i":{..},"mean_r1":..}`
    pub fn to_json(&self) -> serde_json::Value {
        let dir = |v: &[f64]| {
            self.ks
                .iter()
                .zip(v)
                .map(|(k, r)| (format!("R@{k}"), serde_json::json!(r)))
                .collect::<serde_json::Map<_, _>>()
        };
        serde_json::json!({
            "i2t": dir(&self.i2t),
            "t2i": dir(&self.t2i),
            "mean_r1": self.mean_r1(),
            "queries": self.queries,
        })
    }
}

/// Candidate rows of one query: the positive and its negatives, sorted by id.
fn query_ranks(index: &RetrievalIndex, q: usize, cands: &[usize], dir: Direction) -> usize {
    let query = index.queries(dir).row(q);
    let cm = index.candidates(dir);
    let scores: Vec<f64> = cands.iter().map(|&c| cm.row(c).dot(&query)).collect();
    let ids: Vec<&str> = cands.iter().map(|&c| index.ids[c].as_str()).collect();
    let pos = cands.iter().position(|&c| c == q).expect("positive among candidates");
    rank_of(&scores, &ids, pos)
}

/// Same-subcategory negatives for query `q`; with replacement when the subcategory is small.
fn draw_negatives<R: Rng + ?Sized>(pool: &[usize], q: usize, n: usize, rng: &mut R) -> Option<Vec<usize>> {
    let others: Vec<usize> = pool.iter().copied().filter(|&j| j != q).collect();
    if others.is_empty() {
        return None;
    }
    Some(if others.len() >= n {
        sample(rng, others.len(), n).into_iter().map(|k| others[k]).collect()
    } else {
        (0..n).map(|_| others[rng.random_range(0..others.len())]).collect()
    })
}

/// Each query ranks its positive against `n_negatives` items of the same subcategory; recall
/// is averaged over `n_sets` seeded query draws.
pub fn subset_protocol_eval(index: &RetrievalIndex, subcategories: &[String], cfg: &ProtocolConfig) -> Result<RetrievalReport> {
    if index.is_empty() {
        bail!(InvalidInput, "cannot evaluate an empty index");
    }
    if subcategories.len() != index.len() {
        bail!(InvalidInput, "{} subcategory labels for {} items", subcategories.len(), index.len());
    }
    if cfg.n_sets == 0 || cfg.n_queries == 0 || cfg.n_negatives == 0 {
        bail!(InvalidConfig, "query, negative and set counts must be positive");
    }
    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in subcategories.iter().enumerate() {
        pools.entry(s.as_str()).or_default().push(i);
    }
    let mut small = 0usize;
    let mut skipped = 0usize;
    let mut ranks: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut sums = [vec![0.0; cfg.ks.len()], vec![0.0; cfg.ks.len()]];
    for set in 0..cfg.n_sets {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(set as u64);
        let nq = cfg.n_queries.min(index.len());
        let queries = sample(&mut rng, index.len(), nq).into_vec();
        let mut set_ranks: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for q in queries {
            let pool = &pools[subcategories[q].as_str()];
            if pool.len() - 1 < cfg.n_negatives {
                small += 1;
            }
            let Some(negs) = draw_negatives(pool, q, cfg.n_negatives, &mut rng) else {
                skipped += 1;
                continue;
            };
            let mut cands = negs;
            cands.push(q);
            for (d, dir) in Direction::BOTH.into_iter().enumerate() {
                set_ranks[d].push(query_ranks(index, q, &cands, dir));
            }
        }
        for d in 0..2 {
            for (s, r) in sums[d].iter_mut().zip(recall_from_ranks(&set_ranks[d], &cfg.ks)) {
                *s += r;
            }
            ranks[d].append(&mut set_ranks[d]);
        }
    }
    if small > 0 {
        log::warn!("{small} queries drew negatives with replacement from a small subcategory");
    }
    if skipped > 0 {
        log::warn!("{skipped} queries skipped: no other item in their subcategory");
    }
    if ranks[0].is_empty() {
        bail!(InvalidInput, "no query has a same-subcategory negative");
    }
    let avg = |v: &[f64]| v.iter().map(|s| s / cfg.n_sets as f64).collect::<Vec<_>>();
    Ok(RetrievalReport {
        ks: cfg.ks.clone(),
        i2t: avg(&sums[0]),
        t2i: avg(&sums[1]),
        queries: ranks[0].len(),
    })
}

/// Every item queries against all items of the opposite modality.
pub fn full_protocol_eval(index: &RetrievalIndex, ks: &[usize]) -> Result<RetrievalReport> {
    if index.is_empty() {
        bail!(InvalidInput, "cannot evaluate an empty index");
    }
    let all: Vec<usize> = (0..index.len()).collect();
    let mut out = [Vec::new(), Vec::new()];
    for (d, dir) in Direction::BOTH.into_iter().enumerate() {
        let ranks: Vec<usize> = all.iter().map(|&q| query_ranks(index, q, &all, dir)).collect();
        out[d] = recall_from_ranks(&ranks, ks);
    }
    let [i2t, t2i] = out;
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        i2t,
        t2i,
        queries: index.len(),
    })
}
