//! Benchmark constructions (concept-conjunction prompts, attribute-swap
//! contrast pairs) and the head-to-head evaluation harness over the guidance
//! methods, scored by the binding oracle.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::ShapesConfig;
use crate::error::{Result, SdgError};
use crate::oracle::binding_oracle;
use crate::pipeline::{GuidanceMethod, Pipeline, SampleRequest};
use crate::vocab::{normalize_words, Pos, Vocabulary};

/// The 11 basic English color terms.
pub const DEFAULT_COLORS: [&str; 11] = [
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white",
    "gray",
];

/// Object lexicon = every noun in the vocabulary, in id order.
pub fn default_objects(vocab: &Vocabulary) -> Vec<String> {
    (0..vocab.len() as u32)
        .filter(|&id| vocab.pos_of(id) == Pos::Noun)
        .map(|id| vocab.token(id).to_string())
        .collect()
}

/// `n` distinct prompts of the form "a {colorA} {objectA} and a {colorB}
/// {objectB}" with colorA != colorB and objectA != objectB, sampled without
/// replacement, deterministically in `seed`.
pub fn generate_cc500(
    colors: &[String],
    objects: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut combos = Vec::new();
    for ca in colors {
        for oa in objects {
            for cb in colors {
                for ob in objects {
                    if ca != cb && oa != ob {
                        combos.push(format!("a {ca} {oa} and a {cb} {ob}"));
                    }
                }
            }
        }
    }
    if combos.len() < n {
        return Err(SdgError::InsufficientCombinations { requested: n, available: combos.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    combos.truncate(n);
    Ok(combos)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastPair {
    pub original: String,
    pub swapped: String,
    /// Word indices (after normalization) of the two swapped color words.
    pub pos_a: usize,
    pub pos_b: usize,
}

impl ContrastPair {
    /// The two captions differ exactly at the recorded positions, and the
    /// differing words are both colors.
    pub fn check(&self, colors: &[String]) -> bool {
        let a = normalize_words(&self.original);
        let b = normalize_words(&self.swapped);
        if a.len() != b.len() || self.pos_a >= a.len() || self.pos_b >= a.len() {
            return false;
        }
        for i in 0..a.len() {
            let differs = a[i] != b[i];
            let recorded = i == self.pos_a || i == self.pos_b;
            if differs != recorded {
                return false;
            }
        }
        colors.contains(&a[self.pos_a]) && colors.contains(&a[self.pos_b])
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.original, self.swapped, self.pos_a, self.pos_b)
    }

    pub fn from_line(line: &str) -> Result<ContrastPair> {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(SdgError::Config(format!("bad contrast-pair line: {line}")));
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| SdgError::Config(format!("bad index in contrast-pair line: {line}")))
        };
        Ok(ContrastPair {
            original: parts[0].to_string(),
            swapped: parts[1].to_string(),
            pos_a: idx(parts[2])?,
            pos_b: idx(parts[3])?,
        })
    }
}

/// Keeps captions where at least two color words each immediately precede a
/// noun, and those nouns are distinct; swaps the first two qualifying color
/// words. Returns the pairs and the number of captions skipped.
pub fn build_abc_contrast(
    captions: &str,
    colors: &[String],
    vocab: &Vocabulary,
) -> (Vec<ContrastPair>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for line in captions.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let words = normalize_words(line);
        let mut hits: Vec<(usize, &str)> = Vec::new(); // (color index, following noun)
        for i in 0..words.len().saturating_sub(1) {
            if colors.contains(&words[i]) && vocab.pos_of(vocab.id_of(&words[i + 1])) == Pos::Noun
            {
                hits.push((i, words[i + 1].as_str()));
            }
        }
        let qualifying = hits.len() >= 2 && hits[0].1 != hits[1].1 && words[hits[0].0] != words[hits[1].0];
        if !qualifying {
            skipped += 1;
            continue;
        }
        let (pa, pb) = (hits[0].0, hits[1].0);
        let mut swapped = words.clone();
        swapped.swap(pa, pb);
        pairs.push(ContrastPair {
            original: words.join(" "),
            swapped: swapped.join(" "),
            pos_a: pa,
            pos_b: pb,
        });
    }
    (pairs, skipped)
}

/// Table-2-style category of one scored image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    ZeroOrOneObj,
    TwoObj,
    TwoObjCorrectColors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MethodCounts {
    pub zero_or_one_obj: usize,
    pub two_obj: usize,
    pub two_obj_correct_colors: usize,
}

impl MethodCounts {
    pub fn total(&self) -> usize {
        self.zero_or_one_obj + self.two_obj + self.two_obj_correct_colors
    }

    fn add(&mut self, c: Category) {
        match c {
            Category::ZeroOrOneObj => self.zero_or_one_obj += 1,
            Category::TwoObj => self.two_obj += 1,
            Category::TwoObjCorrectColors => self.two_obj_correct_colors += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairRecord {
    pub wins: usize,
    pub loses: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<String>,
    pub counts: Vec<MethodCounts>,
    /// One record per unordered method pair (i, j) with i < j, from i's
    /// point of view, in lexicographic (i, j) order.
    pub pairs: Vec<(usize, usize, PairRecord)>,
    pub samples: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "config_digest={}", self.config_digest);
        for (m, c) in self.methods.iter().zip(self.counts.iter()) {
            let _ = writeln!(s, "{m}.zero_or_one_obj={}", c.zero_or_one_obj);
            let _ = writeln!(s, "{m}.two_obj={}", c.two_obj);
            let _ = writeln!(s, "{m}.two_obj_correct_colors={}", c.two_obj_correct_colors);
        }
        for &(i, j, r) in &self.pairs {
            let key = format!("{}_vs_{}", self.methods[i], self.methods[j]);
            let _ = writeln!(s, "{key}.wins={}", r.wins);
            let _ = writeln!(s, "{key}.loses={}", r.loses);
            let _ = writeln!(s, "{key}.ties={}", r.ties);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>14} {:>10} {:>22}",
            "method", "zero/one obj", "two obj", "two obj correct col"
        );
        for (m, c) in self.methods.iter().zip(self.counts.iter()) {
            let pct = |n: usize| 100.0 * n as f64 / self.samples.max(1) as f64;
            let _ = writeln!(
                s,
                "{:<12} {:>9} ({:>4.1}%) {:>5} ({:>4.1}%) {:>13} ({:>4.1}%)",
                m,
                c.zero_or_one_obj,
                pct(c.zero_or_one_obj),
                c.two_obj,
                pct(c.two_obj),
                c.two_obj_correct_colors,
                pct(c.two_obj_correct_colors),
            );
        }
        for &(i, j, r) in &self.pairs {
            let _ = writeln!(
                s,
                "{} vs {}: {} wins / {} loses / {} ties",
                self.methods[i], self.methods[j], r.wins, r.loses, r.ties
            );
        }
        s
    }
}

/// Worker cap from `SDG_THREADS`; defaults to the machine's parallelism.
pub fn worker_count() -> usize {
    match std::env::var("SDG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

fn category(pipeline: &Pipeline, req: &SampleRequest, zt: &[crate::Real], shapes: &ShapesConfig) -> Result<Category> {
    let rec = pipeline.sample_from(req, Some(zt.to_vec()))?;
    let r = binding_oracle(&rec.image, &req.prompt, shapes);
    Ok(if !r.all_found() {
        Category::ZeroOrOneObj
    } else if r.all_correct() {
        Category::TwoObjCorrectColors
    } else {
        Category::TwoObj
    })
}

/// Samples every (prompt, seed) with each method from a shared z^T and
/// aggregates oracle categories. The fan-out across (prompt, seed) jobs is
/// capped by `SDG_THREADS`; results are merged in job-index order, so the
/// report is independent of the thread count.
pub fn run_headtohead(
    pipeline: &Pipeline,
    prompts: &[String],
    methods: &[GuidanceMethod],
    seeds: &[u64],
    shapes: &ShapesConfig,
) -> Result<EvalReport> {
    let jobs: Vec<(usize, u64)> = prompts
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| seeds.iter().map(move |&s| (pi, s)))
        .collect();

    let workers = worker_count().min(jobs.len()).max(1);
    let mut results: Vec<Option<Result<Vec<Category>>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let jobs = &jobs;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for ji in (w..jobs.len()).step_by(workers) {
                    let (pi, seed) = jobs[ji];
                    let zt = pipeline.initial_latent(seed);
                    let cats: Result<Vec<Category>> = methods
                        .iter()
                        .map(|&m| {
                            let req = SampleRequest::new(&prompts[pi], m, seed);
                            category(pipeline, &req, &zt, shapes)
                        })
                        .collect();
                    out.push((ji, cats));
                }
                out
            }));
        }
        for h in handles {
            for (ji, cats) in h.join().expect("eval worker panicked") {
                results[ji] = Some(cats);
            }
        }
    });

    let mut counts = vec![MethodCounts::default(); methods.len()];
    let mut pair_records = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            pair_records.push((i, j, PairRecord::default()));
        }
    }
    for slot in results {
        let cats = slot.expect("missing eval result")?;
        for (mi, &c) in cats.iter().enumerate() {
            counts[mi].add(c);
        }
        for (i, j, r) in pair_records.iter_mut() {
            match cats[*i].cmp(&cats[*j]) {
                std::cmp::Ordering::Greater => r.wins += 1,
                std::cmp::Ordering::Less => r.loses += 1,
                std::cmp::Ordering::Equal => r.ties += 1,
            }
        }
    }

    let mut hasher = Sha256::new();
    hasher.update(format!(
        "steps={} scale={} sampler={:?} prompts={} seeds={:?} methods={:?}",
        pipeline.config.steps,
        pipeline.config.guidance_scale,
        pipeline.config.sampler,
        prompts.len(),
        seeds,
        methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
    ));
    let digest = format!("{:x}", hasher.finalize());

    Ok(EvalReport {
        methods: methods.iter().map(|m| m.as_str().to_string()).collect(),
        counts,
        pairs: pair_records,
        samples: jobs.len(),
        config_digest: digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionMode;
    use crate::pipeline::tests::tiny_pipeline;
    use crate::vocab::test_vocab;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cc500_respects_constraints_and_count() {
        let colors = strs(&["red", "yellow"]);
        let objects = strs(&["apple", "banana"]);
        let prompts = generate_cc500(&colors, &objects, 4, 0).unwrap();
        assert_eq!(prompts.len(), 4);
        let re_like = |p: &str| {
            let w: Vec<&str> = p.split(' ').collect();
            w.len() == 7
                && w[0] == "a"
                && w[3] == "and"
                && w[4] == "a"
                && w[1] != w[5]
                && w[2] != w[6]
        };
        for p in &prompts {
            assert!(re_like(p), "{p}");
        }
        let mut uniq = prompts.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), prompts.len());
    }

    #[test]
    fn cc500_is_seed_deterministic_and_errors_when_exhausted() {
        let colors = strs(&["red", "yellow", "blue"]);
        let objects = strs(&["apple", "banana", "car"]);
        let a = generate_cc500(&colors, &objects, 30, 7).unwrap();
        let b = generate_cc500(&colors, &objects, 30, 7).unwrap();
        assert_eq!(a, b);
        let err = generate_cc500(&colors, &objects, 100, 7).unwrap_err();
        assert!(matches!(
            err,
            SdgError::InsufficientCombinations { requested: 100, available: 36 }
        ));
    }

    #[test]
    fn abc_contrast_swaps_first_two_color_words() {
        let vocab = test_vocab();
        let colors: Vec<String> = DEFAULT_COLORS.iter().map(|s| s.to_string()).collect();
        let (pairs, skipped) = build_abc_contrast(
            "a brown bench in front of a white building\na red red car\njust words here\n",
            &colors,
            &vocab,
        );
        assert_eq!(pairs.len(), 1);
        assert_eq!(skipped, 2);
        assert_eq!(pairs[0].swapped, "a white bench in front of a brown building");
        assert!(pairs[0].check(&colors));
    }

    #[test]
    fn bundled_abc_sample_has_golden_count() {
        let vocab = crate::vocab::default_vocab();
        let colors: Vec<String> = DEFAULT_COLORS.iter().map(|s| s.to_string()).collect();
        let (pairs, skipped) =
            build_abc_contrast(include_str!("../data/abc_captions_200.txt"), &colors, &vocab);
        assert_eq!(pairs.len(), 100);
        assert_eq!(skipped, 100);
        for p in &pairs {
            assert!(p.check(&colors), "{p:?}");
        }
    }

    #[test]
    fn contrast_pair_line_round_trip() {
        let p = ContrastPair {
            original: "a brown bench and a white building".into(),
            swapped: "a white bench and a brown building".into(),
            pos_a: 1,
            pos_b: 6,
        };
        assert_eq!(ContrastPair::from_line(&p.to_line()).unwrap(), p);
        assert!(ContrastPair::from_line("too\tfew").is_err());
    }

    #[test]
    fn same_method_twice_yields_identical_counts_and_all_ties() {
        let p = tiny_pipeline(2);
        let prompts = strs(&["a red square and a blue circle", "a green circle and a red square"]);
        let methods = [
            GuidanceMethod::Fusion(FusionMode::Baseline),
            GuidanceMethod::Fusion(FusionMode::Baseline),
        ];
        let report =
            run_headtohead(&p, &prompts, &methods, &[0, 1], &ShapesConfig::default()).unwrap();
        assert_eq!(report.counts[0], report.counts[1]);
        assert_eq!(report.samples, 4);
        let (_, _, r) = report.pairs[0];
        assert_eq!((r.wins, r.loses, r.ties), (0, 0, 4));
        assert_eq!(report.counts[0].total(), 4);
    }

    #[test]
    fn report_is_independent_of_thread_count() {
        let p = tiny_pipeline(2);
        let prompts = strs(&["a red square and a blue circle"]);
        let methods = [
            GuidanceMethod::Fusion(FusionMode::Baseline),
            GuidanceMethod::Fusion(FusionMode::MultiValue),
        ];
        let shapes = ShapesConfig::default();
        std::env::set_var("SDG_THREADS", "1");
        let a = run_headtohead(&p, &prompts, &methods, &[0, 1, 2], &shapes).unwrap();
        std::env::set_var("SDG_THREADS", "3");
        let b = run_headtohead(&p, &prompts, &methods, &[0, 1, 2], &shapes).unwrap();
        std::env::remove_var("SDG_THREADS");
        assert_eq!(a, b);
        assert_eq!(a.to_key_values(), b.to_key_values());
    }
}
