//! Co-occurrence and relation statistics over a scene-graph corpus.
//!
//! Three count tables feed the model:
//!
//! * `count(C)`: instances of a category over the whole corpus;
//! * `count(A, B)`: images containing at least one `A` and one `B` (for
//!   `A == B` the image must contain two instances);
//! * `count(C, r, Cj)`: annotated `(subject, relation, object)` instances.
//!
//! Alongside the counts, every annotated triple whose subject is insertable
//! contributes one pairwise feature sample `f(subject box, object box)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_model::{pair_feature, BBox, PairFeature, Vocabulary, VocabularyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("corpus contains no usable records")]
    EmptyCorpus,
    #[error("no category co-occurs with any insertable category")]
    NoContext,
    #[error("no relation has an insertable subject")]
    NoRelations,
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("image {image}: relation references missing object {id}")]
    DanglingObject { image: String, id: u64 },
    #[error("image {image}: object id {id} appears twice")]
    DuplicateObject { image: String, id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u64,
    pub category: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationAnnotation {
    pub subject: u64,
    pub predicate: String,
    pub object: u64,
}

/// One annotated training image. Boxes are in internal coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<RelationAnnotation>,
}

impl SceneGraphRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(o.id) {
                return Err(RecordError::DuplicateObject { image: self.image_id.clone(), id: o.id });
            }
        }
        for r in &self.relations {
            for id in [r.subject, r.object] {
                if !seen.contains(&id) {
                    return Err(RecordError::DanglingObject { image: self.image_id.clone(), id });
                }
            }
        }
        Ok(())
    }

    fn object_map(&self) -> HashMap<u64, &SceneObject> {
        self.objects.iter().map(|o| (o.id, o)).collect()
    }

    /// Instance count per category in this image.
    fn category_counts(&self) -> BTreeMap<&str, u64> {
        let mut m = BTreeMap::new();
        for o in &self.objects {
            *m.entry(o.category.as_str()).or_insert(0) += 1;
        }
        m
    }
}

/// `(inserted subject, relation, context object)`; one mixture is fitted per key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripleKey {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl TripleKey {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), relation: relation.into(), object: object.into() }
    }
}

impl fmt::Display for TripleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Count tables restricted to vocabulary members. Absent keys count zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTables {
    categories: BTreeMap<String, u64>,
    pairs: BTreeMap<(String, String), u64>,
    triples: BTreeMap<TripleKey, u64>,
}

impl CountTables {
    pub fn category(&self, c: &str) -> u64 {
        self.categories.get(c).copied().unwrap_or(0)
    }

    /// Image-level co-occurrence; symmetric in its arguments.
    pub fn pair(&self, a: &str, b: &str) -> u64 {
        self.pairs.get(&pair_key(a, b)).copied().unwrap_or(0)
    }

    pub fn triple(&self, key: &TripleKey) -> u64 {
        self.triples.get(key).copied().unwrap_or(0)
    }

    pub fn categories(&self) -> impl Iterator<Item = (&str, u64)> {
        self.categories.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Pairs in canonical `(a <= b)` order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.pairs.iter().map(|((a, b), &v)| (a.as_str(), b.as_str(), v))
    }

    pub fn triples(&self) -> impl Iterator<Item = (&TripleKey, u64)> {
        self.triples.iter().map(|(k, &v)| (k, v))
    }

    pub fn add_category(&mut self, c: &str, n: u64) {
        if n > 0 {
            *self.categories.entry(c.to_string()).or_insert(0) += n;
        }
    }

    pub fn add_pair(&mut self, a: &str, b: &str, n: u64) {
        if n > 0 {
            *self.pairs.entry(pair_key(a, b)).or_insert(0) += n;
        }
    }

    pub fn add_triple(&mut self, key: TripleKey, n: u64) {
        if n > 0 {
            *self.triples.entry(key).or_insert(0) += n;
        }
    }

    fn merge(&mut self, other: CountTables) {
        for (k, v) in other.categories {
            *self.categories.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.pairs {
            *self.pairs.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.triples {
            *self.triples.entry(k).or_insert(0) += v;
        }
    }
}

/// Feature samples gathered for one triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleSamples {
    pub key: TripleKey,
    pub features: Vec<PairFeature>,
}

/// Everything one pass over the corpus produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub counts: CountTables,
    pub samples: BTreeMap<TripleKey, Vec<PairFeature>>,
    /// Records rejected by [`SceneGraphRecord::validate`].
    pub skipped_records: usize,
}

impl CorpusStats {
    /// Folds one record into the tables. Invalid records are counted and skipped.
    pub fn add(&mut self, record: &SceneGraphRecord, vocab: &Vocabulary) {
        if let Err(e) = record.validate() {
            warn!("skipping record: {e}");
            self.skipped_records += 1;
            return;
        }
        let per_cat = record.category_counts();
        let present: Vec<(&str, u64)> =
            per_cat.iter().filter(|(c, _)| vocab.contains_category(c)).map(|(c, n)| (*c, *n)).collect();
        for &(c, n) in &present {
            self.counts.add_category(c, n);
        }
        for (i, &(a, na)) in present.iter().enumerate() {
            if na >= 2 {
                self.counts.add_pair(a, a, 1);
            }
            for &(b, _) in &present[i + 1..] {
                self.counts.add_pair(a, b, 1);
            }
        }
        let objects = record.object_map();
        for rel in &record.relations {
            let (s, o) = (objects[&rel.subject], objects[&rel.object]);
            if vocab.insertable_id(&s.category).is_none()
                || vocab.relation_id(&rel.predicate).is_none()
                || vocab.context_id(&o.category).is_none()
            {
                continue;
            }
            let key = TripleKey::new(&s.category, &rel.predicate, &o.category);
            // Boxes were validated at construction, so the reference is non-degenerate.
            let f = pair_feature(&s.bbox, &o.bbox).expect("validated box");
            self.counts.add_triple(key.clone(), 1);
            self.samples.entry(key).or_default().push(f);
        }
    }

    /// Combines two shards; `other`'s samples are appended after `self`'s.
    pub fn merge(&mut self, other: CorpusStats) {
        self.counts.merge(other.counts);
        for (k, mut v) in other.samples {
            self.samples.entry(k).or_default().append(&mut v);
        }
        self.skipped_records += other.skipped_records;
    }

    /// Sharded pass over the corpus. Sample lists keep corpus order.
    pub fn from_records(corpus: &[SceneGraphRecord], vocab: &Vocabulary) -> Self {
        corpus
            .par_iter()
            .fold(CorpusStats::default, |mut acc, r| {
                acc.add(r, vocab);
                acc
            })
            .reduce(CorpusStats::default, |mut a, b| {
                a.merge(b);
                a
            })
    }
}

pub fn build_counts(corpus: &[SceneGraphRecord], vocab: &Vocabulary) -> CountTables {
    CorpusStats::from_records(corpus, vocab).counts
}

/// Per-triple feature samples, plus the number of records skipped as invalid.
pub fn collect_triple_samples(
    corpus: &[SceneGraphRecord],
    vocab: &Vocabulary,
) -> (BTreeMap<TripleKey, TripleSamples>, usize) {
    let stats = CorpusStats::from_records(corpus, vocab);
    let samples =
        stats.samples.into_iter().map(|(key, features)| (key.clone(), TripleSamples { key, features })).collect();
    (samples, stats.skipped_records)
}

fn top_by_score(scores: BTreeMap<&str, u64>, n: usize) -> Vec<String> {
    // BTreeMap iteration is lexicographic and the sort is stable, so ties
    // resolve by name.
    let mut ranked: Vec<(&str, u64)> = scores.into_iter().filter(|(_, s)| *s > 0).collect();
    ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
    ranked.into_iter().take(n).map(|(c, _)| c.to_string()).collect()
}

/// Picks the context categories that co-occur most with the insertable ones
/// and the relations most often annotated with an insertable subject.
pub fn select_vocabulary(
    corpus: &[SceneGraphRecord],
    insertable: &[String],
    top_context: usize,
    top_relations: usize,
) -> Result<Vocabulary, CorpusError> {
    let insertable_set: BTreeSet<&str> = insertable.iter().map(String::as_str).collect();
    let mut context_score: BTreeMap<&str, u64> = BTreeMap::new();
    let mut relation_score: BTreeMap<&str, u64> = BTreeMap::new();
    let mut usable = 0usize;
    for record in corpus {
        if let Err(e) = record.validate() {
            warn!("skipping record: {e}");
            continue;
        }
        usable += 1;
        let per_cat = record.category_counts();
        for c in per_cat.keys().filter(|c| insertable_set.contains(*c)) {
            for (&other, &n) in &per_cat {
                if other != *c || n >= 2 {
                    *context_score.entry(other).or_insert(0) += 1;
                }
            }
        }
        let objects = record.object_map();
        for rel in &record.relations {
            if insertable_set.contains(objects[&rel.subject].category.as_str()) {
                *relation_score.entry(rel.predicate.as_str()).or_insert(0) += 1;
            }
        }
    }
    if usable == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let context = top_by_score(context_score, top_context);
    if context.is_empty() {
        return Err(CorpusError::NoContext);
    }
    let relations = top_by_score(relation_score, top_relations);
    if relations.is_empty() {
        return Err(CorpusError::NoRelations);
    }
    Ok(Vocabulary::new(insertable.to_vec(), context, relations)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: u64, cat: &str, x: f64) -> SceneObject {
        SceneObject { id, category: cat.into(), bbox: BBox { x, y: 0.0, w: 2.0, h: 2.0 } }
    }

    fn rel(s: u64, p: &str, o: u64) -> RelationAnnotation {
        RelationAnnotation { subject: s, predicate: p.into(), object: o }
    }

    fn rec(id: &str, objects: Vec<SceneObject>, relations: Vec<RelationAnnotation>) -> SceneGraphRecord {
        SceneGraphRecord { image_id: id.into(), width: 100, height: 100, objects, relations }
    }

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn two_image_corpus() -> Vec<SceneGraphRecord> {
        vec![
            rec("img1", vec![obj(1, "wall", 0.0), obj(2, "table", 5.0), obj(3, "clock", 1.0)], vec![rel(3, "on", 1)]),
            rec("img2", vec![obj(1, "table", 0.0)], vec![]),
        ]
    }

    #[test]
    fn vocabulary_tie_breaks_lexicographically() {
        // wall and table each co-occur with clock once; "table" sorts first.
        let v = select_vocabulary(&two_image_corpus(), &names(&["clock"]), 1, 1).unwrap();
        assert_eq!(v.context(), &names(&["table"])[..]);
        assert_eq!(v.relations(), &names(&["on"])[..]);
        let v = select_vocabulary(&two_image_corpus(), &names(&["clock"]), 5, 5).unwrap();
        assert_eq!(v.context(), &names(&["table", "wall"])[..]);
    }

    #[test]
    fn vocabulary_empty_corpus() {
        assert_eq!(select_vocabulary(&[], &names(&["clock"]), 20, 10), Err(CorpusError::EmptyCorpus));
    }

    #[test]
    fn vocabulary_is_deterministic_under_permutation() {
        let mut c = two_image_corpus();
        let a = select_vocabulary(&c, &names(&["clock"]), 5, 5).unwrap();
        c.reverse();
        assert_eq!(a, select_vocabulary(&c, &names(&["clock"]), 5, 5).unwrap());
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(names(&["clock", "cup"]), names(&["wall", "table"]), names(&["on"])).unwrap()
    }

    #[test]
    fn counts_hand_example() {
        let c =
            vec![rec("a", vec![obj(1, "wall", 0.0), obj(2, "wall", 5.0), obj(3, "clock", 1.0)], vec![rel(3, "on", 1)])];
        let t = build_counts(&c, &vocab());
        assert_eq!(t.category("wall"), 2);
        assert_eq!(t.pair("clock", "wall"), 1);
        assert_eq!(t.pair("wall", "clock"), 1);
        assert_eq!(t.pair("wall", "wall"), 1);
        assert_eq!(t.triple(&TripleKey::new("clock", "on", "wall")), 1);
    }

    #[test]
    fn counts_without_relations() {
        let c = vec![rec("a", vec![obj(1, "wall", 0.0), obj(2, "clock", 1.0)], vec![])];
        let t = build_counts(&c, &vocab());
        assert_eq!(t.triples().count(), 0);
    }

    #[test]
    fn pair_counts_are_image_level() {
        let img = |id: &str| {
            rec(id, vec![obj(1, "cup", 0.0), obj(2, "cup", 1.0), obj(3, "table", 2.0), obj(4, "table", 3.0)], vec![])
        };
        let t = build_counts(&[img("a"), img("b")], &vocab());
        assert_eq!(t.pair("cup", "table"), 2);
        assert_eq!(t.category("cup"), 4);
    }

    #[test]
    fn non_vocabulary_keys_are_not_stored() {
        let c = vec![rec("a", vec![obj(1, "sofa", 0.0), obj(2, "clock", 1.0)], vec![rel(2, "on", 1)])];
        let t = build_counts(&c, &vocab());
        assert_eq!(t.category("sofa"), 0);
        assert_eq!(t.pairs().count(), 0);
        assert_eq!(t.triples().count(), 0);
    }

    #[test]
    fn single_sample() {
        let c = vec![rec("a", vec![obj(1, "wall", 0.0), obj(2, "clock", 1.0)], vec![rel(2, "on", 1)])];
        let (s, skipped) = collect_triple_samples(&c, &vocab());
        assert_eq!(skipped, 0);
        let key = TripleKey::new("clock", "on", "wall");
        assert_eq!(s[&key].features, vec![PairFeature([0.5, 0.0, 1.0, 1.0])]);
    }

    #[test]
    fn predicate_outside_vocabulary() {
        let c = vec![rec("a", vec![obj(1, "wall", 0.0), obj(2, "clock", 1.0)], vec![rel(2, "near", 1)])];
        let (s, _) = collect_triple_samples(&c, &vocab());
        assert!(s.is_empty());
    }

    #[test]
    fn dangling_object_skips_record() {
        let c = vec![
            rec("a", vec![obj(1, "wall", 0.0)], vec![rel(9, "on", 1)]),
            rec("b", vec![obj(1, "wall", 0.0), obj(2, "clock", 1.0)], vec![rel(2, "on", 1)]),
        ];
        let (s, skipped) = collect_triple_samples(&c, &vocab());
        assert_eq!(skipped, 1);
        assert_eq!(s.len(), 1);
        assert_eq!(build_counts(&c, &vocab()).category("wall"), 1);
    }

    #[test]
    fn samples_match_triple_counts_and_order_independent() {
        let mut corpus = Vec::new();
        for i in 0..40u64 {
            let cat = if i % 3 == 0 { "cup" } else { "clock" };
            let ctx = if i % 2 == 0 { "wall" } else { "table" };
            corpus.push(rec(
                &format!("img{i}"),
                vec![obj(1, ctx, i as f64), obj(2, cat, 0.5 * i as f64), obj(3, ctx, 1.0)],
                vec![rel(2, "on", 1), rel(2, "on", 3), rel(1, "on", 2)],
            ));
        }
        let stats = CorpusStats::from_records(&corpus, &vocab());
        let total_relations: u64 = corpus.iter().map(|r| r.relations.len() as u64).sum();
        for (k, n) in stats.counts.triples() {
            assert!(n <= total_relations);
            assert_eq!(stats.samples[k].len() as u64, n);
        }
        let mut rev = corpus.clone();
        rev.reverse();
        assert_eq!(build_counts(&rev, &vocab()), stats.counts);
    }
}
