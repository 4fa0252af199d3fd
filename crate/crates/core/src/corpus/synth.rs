//! Deterministic synthetic corpus.
//!
//! Each class is a pair of attributes `(a, b)`. Text names the attributes with
//! class-specific tokens; images are a mixture of per-attribute and per-class
//! prototype grids plus Gaussian noise. The class is therefore recoverable from
//! either modality, and text predicts most of the image, which is what makes
//! completing a missing image from text learnable. Held-out (OOD) classes are
//! unseen attribute combinations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::types::{ModalInput, ModalityCombo, PairRecord, PatchGrid, Split, TaskTag};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Instruction tokens per task tag. Task `t` uses ids `2t` and `2t + 1`.
pub const INSTRUCTION_LEN: usize = 2;
const FILLER_BASE: u32 = 8;
const FILLER_COUNT: u32 = 8;
const ATTRIBUTE_BASE: u32 = FILLER_BASE + FILLER_COUNT;
const SYNONYMS: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub patches: usize,
    pub patch_dim: usize,
    /// IND plus OOD classes.
    pub n_classes: usize,
    pub counts: BTreeMap<ModalityCombo, usize>,
    /// Share of classes held out as OOD.
    pub ood_fraction: f64,
    pub task_mix: BTreeMap<TaskTag, f64>,
    /// Standard deviation of the image noise.
    pub noise_sigma: f64,
    /// Content tokens per input.
    pub content_len: usize,
    /// Probability that each attribute is named in the text of an input that
    /// also carries an image.
    pub image_text_keep: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 64,
            patches: 8,
            patch_dim: 16,
            n_classes: 40,
            counts: ModalityCombo::ALL.iter().map(|&c| (c, 0)).collect(),
            ood_fraction: 0.2,
            task_mix: TaskTag::ALL.iter().map(|&t| (t, 1.0)).collect(),
            noise_sigma: 0.5,
            content_len: 4,
            image_text_keep: 0.5,
        }
    }
}

impl CorpusSpec {
    pub const KEYS: &'static [&'static str] = &[
        "corpus.vocab_size",
        "corpus.patches",
        "corpus.patch_dim",
        "corpus.n_classes",
        "corpus.ood_fraction",
        "corpus.noise_sigma",
        "corpus.content_len",
        "corpus.image_text_keep",
        "corpus.count.",
        "corpus.task_mix.",
    ];

    /// Reads `corpus.*` keys; `seed` and all three `corpus.count.*` keys are required.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut counts = BTreeMap::new();
        for c in ModalityCombo::ALL {
            counts.insert(c, cfg.require(&format!("corpus.count.{}", c.tag()))?);
        }
        let mut task_mix = BTreeMap::new();
        for t in TaskTag::ALL {
            task_mix.insert(t, cfg.get_or(&format!("corpus.task_mix.{}", t.tag()), 1.0)?);
        }
        let spec = Self {
            seed: cfg.require("seed")?,
            vocab_size: cfg.get_or("corpus.vocab_size", d.vocab_size)?,
            patches: cfg.get_or("corpus.patches", d.patches)?,
            patch_dim: cfg.get_or("corpus.patch_dim", d.patch_dim)?,
            n_classes: cfg.get_or("corpus.n_classes", d.n_classes)?,
            counts,
            ood_fraction: cfg.get_or("corpus.ood_fraction", d.ood_fraction)?,
            task_mix,
            noise_sigma: cfg.get_or("corpus.noise_sigma", d.noise_sigma)?,
            content_len: cfg.get_or("corpus.content_len", d.content_len)?,
            image_text_keep: cfg.get_or("corpus.image_text_keep", d.image_text_keep)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_counts(mut self, tit: usize, tti: usize, titi: usize) -> Self {
        self.counts = [
            (ModalityCombo::TiT, tit),
            (ModalityCombo::TTi, tti),
            (ModalityCombo::TiTi, titi),
        ]
        .into_iter()
        .collect();
        self
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Same spec with `dominant` holding half of `total` pairs and the other two
    /// combinations a quarter each.
    pub fn skewed(&self, dominant: ModalityCombo, total: usize) -> Result<Self> {
        if !total.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "skewed corpus total {total} is not divisible by 4"
            )));
        }
        let mut s = self.clone();
        s.counts = ModalityCombo::ALL
            .iter()
            .map(|&c| (c, if c == dominant { total / 2 } else { total / 4 }))
            .collect();
        Ok(s)
    }

    pub fn n_ood(&self) -> usize {
        (self.n_classes as f64 * self.ood_fraction).round() as usize
    }

    /// Attribute grid `(n_a, n_b)` with `n_a * n_b >= n_classes`.
    pub fn attribute_dims(&self) -> (usize, usize) {
        let n_a = (self.n_classes as f64).sqrt().ceil().max(1.0) as usize;
        let n_b = self.n_classes.div_ceil(n_a);
        (n_a, n_b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patches == 0 || self.patch_dim == 0 {
            return bad("patches and patch_dim must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad(format!("ood_fraction {} outside [0, 1)", self.ood_fraction));
        }
        if self.n_ood() >= self.n_classes {
            return bad("no in-distribution classes left".into());
        }
        let (n_a, n_b) = self.attribute_dims();
        let needed = ATTRIBUTE_BASE as usize + SYNONYMS as usize * (n_a + n_b);
        if self.vocab_size < needed {
            return bad(format!(
                "vocab_size {} too small; {} classes need {needed} ids",
                self.vocab_size, self.n_classes
            ));
        }
        if self.content_len < 2 {
            return bad("content_len must be at least 2".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.image_text_keep) {
            return bad("image_text_keep must lie in [0, 1]".into());
        }
        if self.task_mix.values().any(|&w| !(w >= 0.0 && w.is_finite()))
            || self.task_mix.values().sum::<f64>() <= 0.0
        {
            return bad("task_mix weights must be >= 0 with a positive sum".into());
        }
        Ok(())
    }
}

/// Prototypes and class split derived from a [`CorpusSpec`].
#[derive(Debug, Clone)]
pub struct World {
    spec: CorpusSpec,
    n_a: usize,
    attr_a: Vec<Vec<f64>>,
    attr_b: Vec<Vec<f64>>,
    class_proto: Vec<Vec<f64>>,
    ind: Vec<usize>,
    ood: Vec<usize>,
}

fn gaussian_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl World {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let (n_a, n_b) = spec.attribute_dims();
        let cells = spec.patches * spec.patch_dim;
        let mut rng = stream(spec.seed, "corpus.prototypes");
        let attr_a = (0..n_a).map(|_| gaussian_grid(&mut rng, cells)).collect();
        let attr_b = (0..n_b).map(|_| gaussian_grid(&mut rng, cells)).collect();
        let class_proto = (0..spec.n_classes)
            .map(|_| gaussian_grid(&mut rng, cells))
            .collect();

        // Held-out classes must leave every attribute value seen in training.
        let mut rng = stream(spec.seed, "corpus.split");
        let n_ood = spec.n_ood();
        let mut order: Vec<usize> = (0..spec.n_classes).collect();
        let mut chosen = None;
        for _ in 0..256 {
            order.shuffle(&mut rng);
            let (ood, ind) = order.split_at(n_ood);
            let covers = |f: &dyn Fn(usize) -> usize, n: usize| {
                (0..n).all(|v| {
                    ind.iter().any(|&c| f(c) == v) || !(0..spec.n_classes).any(|c| f(c) == v)
                })
            };
            if covers(&|c| c % n_a, n_a) && covers(&|c| c / n_a, n_b) {
                chosen = Some((ind.to_vec(), ood.to_vec()));
                break;
            }
        }
        let (mut ind, mut ood) = chosen.unwrap_or_else(|| {
            let (ood, ind) = order.split_at(n_ood);
            (ind.to_vec(), ood.to_vec())
        });
        ind.sort_unstable();
        ood.sort_unstable();
        Ok(Self {
            spec: spec.clone(),
            n_a,
            attr_a,
            attr_b,
            class_proto,
            ind,
            ood,
        })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn ind_classes(&self) -> &[usize] {
        &self.ind
    }

    pub fn ood_classes(&self) -> &[usize] {
        &self.ood
    }

    pub fn attributes(&self, class_id: usize) -> (usize, usize) {
        (class_id % self.n_a, class_id / self.n_a)
    }

    pub fn instruction(task: TaskTag) -> Vec<u32> {
        let base = (task.index() * INSTRUCTION_LEN) as u32;
        (base..base + INSTRUCTION_LEN as u32).collect()
    }

    fn attr_a_token(&self, a: usize, synonym: u32) -> u32 {
        ATTRIBUTE_BASE + SYNONYMS * a as u32 + synonym
    }

    fn attr_b_token(&self, b: usize, synonym: u32) -> u32 {
        ATTRIBUTE_BASE + SYNONYMS * (self.n_a + b) as u32 + synonym
    }

    /// Noise-free image of a class.
    pub fn prototype(&self, class_id: usize) -> PatchGrid {
        let (a, b) = self.attributes(class_id);
        let scale = 1.0 / 3f64.sqrt();
        let data = self.attr_a[a]
            .iter()
            .zip(&self.attr_b[b])
            .zip(&self.class_proto[class_id])
            .map(|((x, y), z)| (x + y + z) * scale)
            .collect();
        PatchGrid::new(self.spec.patches, self.spec.patch_dim, data).expect("valid dims")
    }

    /// One input of class `class_id`. A pure function of its arguments and the
    /// generator state.
    pub fn gen_item(
        &self,
        class_id: usize,
        task: TaskTag,
        with_image: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModalInput> {
        if class_id >= self.spec.n_classes {
            return Err(Error::contract(format!(
                "class {class_id} out of range for {} classes",
                self.spec.n_classes
            )));
        }
        let (a, b) = self.attributes(class_id);
        let keep = |rng: &mut ChaCha8Rng| !with_image || rng.random::<f64>() < self.spec.image_text_keep;
        let mut content = Vec::with_capacity(self.spec.content_len);
        if keep(rng) {
            content.push(self.attr_a_token(a, rng.random_range(0..SYNONYMS)));
        }
        if keep(rng) {
            content.push(self.attr_b_token(b, rng.random_range(0..SYNONYMS)));
        }
        while content.len() < self.spec.content_len {
            content.push(FILLER_BASE + rng.random_range(0..FILLER_COUNT));
        }
        content.shuffle(rng);

        let image = if with_image {
            let proto = self.prototype(class_id);
            let sigma = self.spec.noise_sigma;
            let data = proto
                .data()
                .iter()
                .map(|v| {
                    let n: f64 = StandardNormal.sample(rng);
                    v + sigma * n
                })
                .collect();
            Some(PatchGrid::new(self.spec.patches, self.spec.patch_dim, data)?)
        } else {
            None
        };
        Ok(ModalInput {
            instruction: Self::instruction(task),
            content,
            image,
        })
    }

    fn pair(
        &self,
        class_id: usize,
        combo: ModalityCombo,
        task: TaskTag,
        split: Split,
        rng: &mut ChaCha8Rng,
    ) -> Result<PairRecord> {
        let query = self.gen_item(class_id, task, combo.query_has_image(), rng)?;
        let target = self.gen_item(class_id, task, combo.target_has_image(), rng)?;
        Ok(PairRecord {
            query,
            target,
            combo,
            task,
            split,
            class_id,
        })
    }

    fn sample_task(&self, rng: &mut ChaCha8Rng) -> TaskTag {
        let total: f64 = self.spec.task_mix.values().sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = TaskTag::Retrieval;
        for (&t, &w) in &self.spec.task_mix {
            if w <= 0.0 {
                continue;
            }
            last = t;
            if u < w {
                return t;
            }
            u -= w;
        }
        last
    }

    /// Training pairs: exactly `counts[combo]` per combination, IND classes
    /// assigned round-robin so class tallies differ by at most one.
    pub fn gen_corpus(&self) -> Result<Vec<PairRecord>> {
        if self.spec.total() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut items = stream(self.spec.seed, "corpus.items");
        let mut tasks = stream(self.spec.seed, "corpus.tasks");
        let mut out = Vec::with_capacity(self.spec.total());
        let mut k = 0;
        for combo in ModalityCombo::ALL {
            for _ in 0..self.spec.counts[&combo] {
                let class_id = self.ind[k % self.ind.len()];
                let task = self.sample_task(&mut tasks);
                out.push(self.pair(class_id, combo, task, Split::Ind, &mut items)?);
                k += 1;
            }
        }
        Ok(out)
    }

    /// Evaluation pairs: for every task with positive weight, every combination
    /// and both splits, one pair per class.
    pub fn gen_eval_corpus(&self) -> Result<Vec<PairRecord>> {
        let mut rng = stream(self.spec.seed, "eval.items");
        let mut out = Vec::new();
        for (&task, &w) in &self.spec.task_mix {
            if w <= 0.0 {
                continue;
            }
            for combo in ModalityCombo::ALL {
                for (split, classes) in [(Split::Ind, &self.ind), (Split::Ood, &self.ood)] {
                    for &c in classes.iter() {
                        out.push(self.pair(c, combo, task, split, &mut rng)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Training corpus for `spec`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<PairRecord>> {
    World::new(spec)?.gen_corpus()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn spec(tit: usize, tti: usize, titi: usize) -> CorpusSpec {
        CorpusSpec {
            seed: 42,
            ..CorpusSpec::default()
        }
        .with_counts(tit, tti, titi)
    }

    fn tally(records: &[PairRecord]) -> [usize; 3] {
        let mut t = [0; 3];
        for r in records {
            t[r.combo.index()] += 1;
        }
        t
    }

    #[test]
    fn exact_per_combo_tallies() {
        let recs = gen_corpus(&spec(10, 5, 5)).unwrap();
        assert_eq!(recs.len(), 20);
        assert_eq!(tally(&recs), [10, 5, 5]);
    }

    #[test]
    fn skewed_variant_counts() {
        let s = spec(0, 0, 0).skewed(ModalityCombo::TTi, 20).unwrap();
        assert_eq!(tally(&gen_corpus(&s).unwrap()), [5, 10, 5]);
        let s = spec(0, 0, 0).skewed(ModalityCombo::TiT, 4000).unwrap();
        assert_eq!(s.counts[&ModalityCombo::TiT], 2000);
        assert_eq!(s.counts[&ModalityCombo::TTi], 1000);
        assert!(spec(0, 0, 0).skewed(ModalityCombo::TiT, 10).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(gen_corpus(&spec(0, 0, 0)), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn records_match_combo_and_share_class() {
        let world = World::new(&spec(30, 30, 30)).unwrap();
        for r in world.gen_corpus().unwrap().iter().chain(&world.gen_eval_corpus().unwrap()) {
            assert!(r.is_consistent());
            for side in [&r.query, &r.target] {
                assert!(!side.instruction.is_empty() && !side.content.is_empty());
                assert!(side.text().iter().all(|&t| (t as usize) < 64));
            }
        }
    }

    #[test]
    fn ind_and_ood_are_disjoint_and_cover_attributes() {
        let world = World::new(&spec(1, 0, 0)).unwrap();
        assert_eq!(world.ood_classes().len(), 8);
        assert_eq!(world.ind_classes().len(), 32);
        let ind: BTreeSet<_> = world.ind_classes().iter().collect();
        assert!(world.ood_classes().iter().all(|c| !ind.contains(c)));
        let (n_a, n_b) = world.spec().attribute_dims();
        for a in 0..n_a {
            assert!(world.ind_classes().iter().any(|&c| world.attributes(c).0 == a));
        }
        for b in 0..n_b {
            let exists = (0..40).any(|c| world.attributes(c).1 == b);
            assert!(!exists || world.ind_classes().iter().any(|&c| world.attributes(c).1 == b));
        }
        let train = world.gen_corpus().unwrap();
        assert!(train.iter().all(|r| r.split == Split::Ind && ind.contains(&r.class_id)));
    }

    #[test]
    fn class_balance_within_one() {
        let recs = gen_corpus(&spec(50, 50, 60)).unwrap();
        let mut per: HashMap<usize, usize> = HashMap::new();
        for r in &recs {
            *per.entry(r.class_id).or_default() += 1;
        }
        let (lo, hi) = (per.values().min().unwrap(), per.values().max().unwrap());
        assert!(hi - lo <= 1, "{lo}..{hi}");
    }

    #[test]
    fn gen_item_is_deterministic_and_noiseless_at_zero_sigma() {
        let mut s = spec(1, 1, 1);
        s.noise_sigma = 0.0;
        let world = World::new(&s).unwrap();
        let rng = stream(9, "x");
        let a = world.gen_item(3, TaskTag::Vqa, true, &mut rng.clone()).unwrap();
        let b = world.gen_item(3, TaskTag::Vqa, true, &mut rng.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.unwrap(), world.prototype(3));
        assert!(world.gen_item(40, TaskTag::Vqa, false, &mut rng.clone()).is_err());
    }

    #[test]
    fn text_only_items_name_both_attributes() {
        let world = World::new(&spec(1, 1, 1)).unwrap();
        let mut rng = stream(1, "t");
        for c in 0..40 {
            let item = world.gen_item(c, TaskTag::Retrieval, false, &mut rng).unwrap();
            let (a, b) = world.attributes(c);
            assert!(item.content.iter().any(|&t| t / 2 == world.attr_a_token(a, 0) / 2));
            assert!(item.content.iter().any(|&t| t / 2 == world.attr_b_token(b, 0) / 2));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_corpus(&spec(7, 8, 9)).unwrap();
        let b = gen_corpus(&spec(7, 8, 9)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(7, 8, 9);
        other.seed = 43;
        assert_ne!(a, gen_corpus(&other).unwrap());
    }

    /// Multinomial logistic regression on mean patch features, trained by
    /// full-batch gradient descent; held-out accuracy must reach 0.95.
    #[test]
    fn class_is_recoverable_from_mean_patch_features() {
        let world = World::new(&spec(1, 1, 1)).unwrap();
        let n_classes = 40;
        let mut rng = stream(77, "probe");
        let items: Vec<(Vec<f64>, usize)> = (0..1000)
            .map(|i| {
                let c = i % n_classes;
                let x = world.gen_item(c, TaskTag::Classification, true, &mut rng).unwrap();
                (x.image.unwrap().mean_patch(), c)
            })
            .collect();
        let (train, test) = items.split_at(800);
        let dim = train[0].0.len();
        let mut w = vec![vec![0.0; dim + 1]; n_classes];
        let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
            w.iter()
                .map(|row| row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        };
        for _ in 0..400 {
            let mut grad = vec![vec![0.0; dim + 1]; n_classes];
            for (x, y) in train {
                let p = crate::numerics::softmax(&logits(&w, x));
                for k in 0..n_classes {
                    let err = p[k] - if k == *y { 1.0 } else { 0.0 };
                    for j in 0..dim {
                        grad[k][j] += err * x[j];
                    }
                    grad[k][dim] += err;
                }
            }
            for k in 0..n_classes {
                for j in 0..=dim {
                    w[k][j] -= 2.0 * grad[k][j] / train.len() as f64;
                }
            }
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let l = logits(&w, x);
                let best = (0..n_classes)
                    .max_by(|&a, &b| l[a].total_cmp(&l[b]))
                    .unwrap();
                best == *y
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }
}
