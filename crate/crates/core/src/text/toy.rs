//! Synthetic planted-cluster data.
//!
//! Every event has a few hidden clusters (its aspects). Its gold inferences
//! are drawn from the templates of those clusters, and the evidence corpus
//! holds one "planted" paragraph per (event, cluster) that contains the
//! event verbatim together with cue words of the cluster. Each event also
//! gets keyword-heavy distractor paragraphs that mention the event but carry
//! no cluster cue; they outrank the planted paragraphs under BM25, so only
//! latent-space selection can find the useful one. The event text itself
//! carries no cluster information, and which aspect an inference belongs to
//! is visible only in the inference.

use std::collections::{BTreeMap, HashSet};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Record;
use crate::error::{Error, Result};

pub const TOY_DIMENSIONS: [&str; 3] = ["xIntent", "xReact", "xWant"];

struct Theme {
    cues: [&'static str; 8],
    intent: [&'static str; 4],
    react: [&'static str; 4],
    want: [&'static str; 4],
}

const THEMES: [Theme; 8] = [
    Theme {
        cues: ["laughter", "party", "music", "dancing", "cheering", "balloons", "celebration", "jokes"],
        intent: [
            "to have fun at the party",
            "to celebrate at the party",
            "to enjoy the party",
            "to dance at the party",
        ],
        react: ["festive and happy", "festive and cheerful", "festive and joyful", "festive and excited"],
        want: [
            "to sing at the party",
            "to stay at the party",
            "to play games at the party",
            "to dance all night at the party",
        ],
    },
    Theme {
        cues: ["argument", "shouting", "fight", "quarrel", "insults", "slammed", "rage", "yelling"],
        intent: ["to win the fight", "to start a fight", "to end the fight", "to avoid losing the fight"],
        react: ["angry and bitter", "angry and offended", "angry and upset", "angry and furious"],
        want: ["to yell in anger", "to storm off in anger", "to break things in anger", "to sulk in anger"],
    },
    Theme {
        cues: ["office", "deadline", "report", "boss", "meeting", "project", "salary", "overtime"],
        intent: ["to finish work for the boss", "to impress the boss", "to work for the boss", "to please the boss"],
        react: ["busy and productive", "tired and productive", "proud and productive", "focused and productive"],
        want: ["to finish the report at work", "to get promoted at work", "to rest after work", "to stay late at work"],
    },
    Theme {
        cues: ["hospital", "nurse", "medicine", "fever", "bandage", "illness", "doctor", "recovery"],
        intent: ["to help the patient", "to heal the patient", "to comfort the patient", "to nurse the patient"],
        react: ["caring and kind", "caring and worried", "caring and gentle", "caring and concerned"],
        want: ["to call a doctor", "to see a doctor", "to ask a doctor", "to bring a doctor"],
    },
    Theme {
        cues: ["darkness", "storm", "scream", "ghost", "danger", "shadows", "thunder", "creaking"],
        intent: ["to stay safe from danger", "to escape the danger", "to hide from danger", "to avoid danger"],
        react: ["scared and afraid", "scared and nervous", "scared and shaking", "scared and terrified"],
        want: ["to run away in fear", "to lock the door in fear", "to call for help in fear", "to hide in fear"],
    },
    Theme {
        cues: ["train", "airport", "luggage", "map", "journey", "passport", "hotel", "abroad"],
        intent: ["to travel abroad", "to travel the world", "to travel on vacation", "to travel to new places"],
        react: ["adventurous and curious", "adventurous and free", "adventurous and relaxed", "adventurous and eager"],
        want: [
            "to book a hotel for the trip",
            "to pack for the trip",
            "to take photos on the trip",
            "to plan the trip",
        ],
    },
    Theme {
        cues: ["coach", "team", "stadium", "ball", "training", "scoreboard", "match", "sweat"],
        intent: ["to win the match", "to train for the match", "to play the match", "to prepare for the match"],
        react: [
            "energetic and competitive",
            "energetic and strong",
            "energetic and determined",
            "energetic and sweaty",
        ],
        want: [
            "to score in the game",
            "to join the team for the game",
            "to practice for the game",
            "to watch the game",
        ],
    },
    Theme {
        cues: ["school", "exam", "library", "teacher", "homework", "lesson", "grades", "classroom"],
        intent: ["to pass the exam", "to study for the exam", "to prepare for the exam", "to do well on the exam"],
        react: ["studious and smart", "studious and calm", "studious and prepared", "studious and focused"],
        want: [
            "to read a book for class",
            "to do homework for class",
            "to ask questions in class",
            "to study after class",
        ],
    },
];

const VERBS: [&str; 20] = [
    "paints",
    "cleans",
    "visits",
    "opens",
    "moves",
    "carries",
    "finds",
    "watches",
    "buys",
    "borrows",
    "sells",
    "brings",
    "checks",
    "draws",
    "repairs",
    "washes",
    "wraps",
    "polishes",
    "measures",
    "photographs",
];
const ADJECTIVES: [&str; 20] = [
    "red", "old", "new", "small", "big", "blue", "green", "wooden", "broken", "shiny", "heavy", "tiny", "yellow",
    "dusty", "antique", "plastic", "striped", "golden", "silver", "purple",
];
const NOUNS: [&str; 24] = [
    "fence", "car", "box", "door", "letter", "bike", "chair", "lamp", "window", "garden", "boat", "piano", "clock",
    "table", "kite", "bag", "mirror", "ladder", "basket", "guitar", "vase", "bench", "helmet", "umbrella",
];
const FILLER: [&str; 16] = [
    "morning",
    "evening",
    "quietly",
    "later",
    "everyone",
    "knew",
    "said",
    "again",
    "somehow",
    "afterwards",
    "neighbors",
    "street",
    "weather",
    "usual",
    "day",
    "week",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_events: usize,
    pub n_clusters: usize,
    /// Leading entries of [`TOY_DIMENSIONS`] to emit records for.
    pub dimensions: usize,
    /// Clusters per event, each with its own planted paragraph.
    pub aspects: usize,
    /// Leading templates of each (cluster, dimension) in use, at most 4.
    pub templates: usize,
    /// Templates drawn per (event, cluster, dimension).
    pub inferences_per_aspect: usize,
    pub distractors: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl ToyConfig {
    pub fn new(seed: u64, n_events: usize, n_clusters: usize) -> Self {
        Self {
            seed,
            n_events,
            n_clusters,
            dimensions: TOY_DIMENSIONS.len(),
            aspects: 2,
            templates: 4,
            inferences_per_aspect: 2,
            distractors: 3,
            dev_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Ground truth for one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub event: String,
    pub clusters: Vec<usize>,
    /// Planted paragraph of each entry of `clusters`.
    pub planted_docs: Vec<usize>,
    pub distractor_docs: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub train: Vec<Record>,
    pub dev: Vec<Record>,
    pub test: Vec<Record>,
    pub corpus: Vec<String>,
    pub events: Vec<PlantedEvent>,
    /// Content words of each cluster's inference templates.
    pub cluster_vocab: Vec<Vec<String>>,
    /// Cluster of every inference template.
    pub template_cluster: BTreeMap<String, usize>,
}

impl ToyDataset {
    pub fn event(&self, text: &str) -> Option<&PlantedEvent> {
        self.events.iter().find(|e| e.event == text)
    }

    /// Planted label of a gold inference.
    pub fn cluster_of(&self, inference: &str) -> Option<usize> {
        self.template_cluster.get(inference).copied()
    }

    /// Planted paragraph matching the cluster of `inference` under `event`.
    pub fn planted_doc(&self, event: &str, inference: &str) -> Option<usize> {
        let e = self.event(event)?;
        let c = self.cluster_of(inference)?;
        e.clusters.iter().position(|&x| x == c).map(|i| e.planted_docs[i])
    }
}

struct ThemeText {
    cues: Vec<String>,
    templates: [Vec<String>; 3],
}

impl ThemeText {
    /// Sorted content words of the inference templates.
    fn words(&self) -> Vec<String> {
        let mut words: Vec<String> = self
            .templates
            .iter()
            .flatten()
            .flat_map(|s| super::tokenize(s))
            .filter(|w| !super::stopwords::is_stopword(w))
            .collect();
        words.sort();
        words.dedup();
        words
    }
}

fn theme_text(c: usize) -> ThemeText {
    if let Some(t) = THEMES.get(c) {
        let own = |xs: &[&str; 4]| xs.iter().map(|s| s.to_string()).collect();
        return ThemeText {
            cues: t.cues.iter().map(|s| s.to_string()).collect(),
            templates: [own(&t.intent), own(&t.react), own(&t.want)],
        };
    }
    // Procedural themes beyond the hand-written ones.
    let word = |kind: &str, i: usize| format!("{kind}{c}n{i}");
    ThemeText {
        cues: (0..8).map(|i| word("cue", i)).collect(),
        templates: [
            (0..4).map(|i| format!("to {} the {}", word("act", i), word("obj", 0))).collect(),
            (0..4).map(|i| format!("{} and {}", word("mood", 0), word("tone", i))).collect(),
            (0..4).map(|i| format!("to {} a {}", word("go", i), word("aim", 0))).collect(),
        ],
    }
}

fn pick_events(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize, usize, bool)> {
    let mut pairs: [HashSet<(usize, usize)>; 3] = Default::default();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        let (v, a, o) =
            (rng.gen_range(0..VERBS.len()), rng.gen_range(0..ADJECTIVES.len()), rng.gen_range(0..NOUNS.len()));
        let keys = [(v, a), (v, o), (a, o)];
        // Two events share at most one content word while that is feasible;
        // afterwards only exact repeats are rejected.
        let strict = attempts < 200 * n;
        let clash = if strict {
            keys.iter().zip(&pairs).any(|(k, s)| s.contains(k))
        } else {
            out.iter().any(|&(v2, a2, o2, _)| (v2, a2, o2) == (v, a, o))
        };
        if clash {
            continue;
        }
        for (k, s) in keys.iter().zip(pairs.iter_mut()) {
            s.insert(*k);
        }
        out.push((v, a, o, rng.gen_bool(0.5)));
    }
    out
}

/// Builds the dataset in memory. Identical configs give identical output.
pub fn generate_toy(cfg: &ToyConfig) -> Result<ToyDataset> {
    if cfg.n_clusters < 2 {
        return Err(Error::Config("toy data needs at least 2 clusters".into()));
    }
    if cfg.aspects == 0 || cfg.aspects > cfg.n_clusters {
        return Err(Error::Config("aspects must be in 1..=n_clusters".into()));
    }
    if cfg.dimensions == 0 || cfg.dimensions > TOY_DIMENSIONS.len() {
        return Err(Error::Config(format!("dimensions must be in 1..={}", TOY_DIMENSIONS.len())));
    }
    if cfg.templates == 0 || cfg.templates > 4 {
        return Err(Error::Config("templates must be in 1..=4".into()));
    }
    if cfg.inferences_per_aspect == 0 || cfg.inferences_per_aspect > cfg.templates {
        return Err(Error::Config("inferences_per_aspect must be in 1..=templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let themes: Vec<ThemeText> = (0..cfg.n_clusters)
        .map(|c| {
            let mut t = theme_text(c);
            t.templates.iter_mut().for_each(|p| p.truncate(cfg.templates));
            t
        })
        .collect();
    let theme_words: Vec<Vec<String>> = themes.iter().map(ThemeText::words).collect();
    let picks = pick_events(&mut rng, cfg.n_events);

    // (text, owner event, planted cluster)
    let mut paragraphs: Vec<(String, Option<usize>, Option<usize>)> = Vec::new();
    let mut events = Vec::with_capacity(cfg.n_events);
    let mut records_by_event = Vec::with_capacity(cfg.n_events);
    for (e, &(v, a, o, possessive)) in picks.iter().enumerate() {
        let object = if possessive {
            format!("PersonY's {} {}", ADJECTIVES[a], NOUNS[o])
        } else {
            format!("the {} {}", ADJECTIVES[a], NOUNS[o])
        };
        let event = format!("PersonX {} {}", VERBS[v], object);
        let mut clusters = rand::seq::index::sample(&mut rng, cfg.n_clusters, cfg.aspects).into_vec();
        clusters.sort_unstable();
        for &c in &clusters {
            let cues: Vec<&String> = themes[c].cues.choose_multiple(&mut rng, 2).collect();
            let words: Vec<&String> = theme_words[c].choose_multiple(&mut rng, 2).collect();
            let planted = format!(
                "{event} . there was {} and {} all around . everyone remembered the {} and the {} . {event} .",
                cues[0], cues[1], words[0], words[1]
            );
            paragraphs.push((planted, Some(e), Some(c)));
        }
        for _ in 0..cfg.distractors {
            let f: Vec<&str> = FILLER.choose_multiple(&mut rng, 2).copied().collect();
            paragraphs.push((format!("{} {event} . {event} {} .", f[0], f[1]), Some(e), None));
        }

        let mut recs = Vec::new();
        for (d, dim) in TOY_DIMENSIONS.iter().enumerate().take(cfg.dimensions) {
            let mut inferences = Vec::new();
            for &c in &clusters {
                let mut pool = themes[c].templates[d].clone();
                pool.shuffle(&mut rng);
                inferences.extend(pool.into_iter().take(cfg.inferences_per_aspect));
            }
            recs.push(Record { event: event.clone(), dimension: dim.to_string(), inferences });
        }
        records_by_event.push(recs);
        events.push(PlantedEvent {
            event,
            clusters,
            planted_docs: vec![0; cfg.aspects],
            distractor_docs: Vec::new(),
            split: Split::Train,
        });
    }
    for _ in 0..cfg.n_events / 2 {
        let n = NOUNS.choose(&mut rng).unwrap();
        let a = ADJECTIVES.choose(&mut rng).unwrap();
        let f: Vec<&str> = FILLER.choose_multiple(&mut rng, 3).copied().collect();
        paragraphs.push((format!("the {a} {n} looked {} that {} , {} .", f[0], f[1], f[2]), None, None));
    }

    paragraphs.shuffle(&mut rng);
    for (doc, (_, owner, planted)) in paragraphs.iter().enumerate() {
        if let Some(e) = owner {
            if let Some(c) = planted {
                let ev = &mut events[*e];
                let i = ev.clusters.iter().position(|x| x == c).expect("planted cluster belongs to its event");
                ev.planted_docs[i] = doc;
            } else {
                events[*e].distractor_docs.push(doc);
            }
        }
    }

    let mut order: Vec<usize> = (0..cfg.n_events).collect();
    order.shuffle(&mut rng);
    let n_dev = (cfg.n_events as f64 * cfg.dev_fraction).round() as usize;
    let n_test = (cfg.n_events as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.n_events.saturating_sub(n_dev + n_test);
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (rank, &e) in order.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        events[e].split = split;
        let target = match split {
            Split::Train => &mut train,
            Split::Dev => &mut dev,
            Split::Test => &mut test,
        };
        target.extend(records_by_event[e].iter().cloned());
    }

    let mut template_cluster = BTreeMap::new();
    for (c, t) in themes.iter().enumerate() {
        for s in t.templates.iter().flatten() {
            template_cluster.insert(s.clone(), c);
        }
    }

    let cluster_vocab = theme_words;

    Ok(ToyDataset {
        train,
        dev,
        test,
        corpus: paragraphs.into_iter().map(|p| p.0).collect(),
        events,
        cluster_vocab,
        template_cluster,
    })
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("plain data serializes"));
        s.push('\n');
    }
    s
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl`, `corpus.txt` and
/// `planted.jsonl` into `out_dir`.
pub fn write_toy_dataset(ds: &ToyDataset, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut corpus = ds.corpus.join("\n");
    corpus.push('\n');
    let files = [
        ("train.jsonl", to_jsonl(&ds.train)),
        ("dev.jsonl", to_jsonl(&ds.dev)),
        ("test.jsonl", to_jsonl(&ds.test)),
        ("corpus.txt", corpus),
        ("planted.jsonl", to_jsonl(&ds.events)),
    ];
    for (name, body) in files {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}

pub fn make_toy_dataset(seed: u64, n_events: usize, n_clusters: usize, out_dir: &Path) -> Result<ToyDataset> {
    let ds = generate_toy(&ToyConfig::new(seed, n_events, n_clusters))?;
    write_toy_dataset(&ds, out_dir)?;
    Ok(ds)
}

pub fn read_planted(path: &Path) -> Result<Vec<PlantedEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::text::tokenize;

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_toy_dataset(3, 40, 4, a.path()).unwrap();
        make_toy_dataset(3, 40, 4, b.path()).unwrap();
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "corpus.txt", "planted.jsonl"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn events_occur_verbatim_in_planted_paragraph() {
        let ds = generate_toy(&ToyConfig::new(1, 60, 4)).unwrap();
        for e in &ds.events {
            assert_eq!(e.planted_docs.len(), 2);
            for (&c, &d) in e.clusters.iter().zip(&e.planted_docs) {
                assert!(ds.corpus[d].contains(&e.event));
                let cues = &THEMES[c].cues;
                assert!(cues.iter().any(|w| ds.corpus[d].contains(w)), "{}", ds.corpus[d]);
            }
            for &d in &e.distractor_docs {
                assert!(ds.corpus[d].contains(&e.event));
            }
        }
    }

    #[test]
    fn needs_two_clusters() {
        assert!(generate_toy(&ToyConfig::new(1, 10, 1)).is_err());
    }

    #[test]
    fn procedural_clusters_beyond_builtin_themes() {
        let ds = generate_toy(&ToyConfig::new(1, 30, 10)).unwrap();
        assert_eq!(ds.cluster_vocab.len(), 10);
        assert!(ds.cluster_vocab[9].iter().all(|w| w.contains('9')));
    }

    // Nearest-centroid over bag-of-words, centroids from the planted labels.
    #[test]
    fn clusters_recoverable_from_bag_of_words() {
        let ds = generate_toy(&ToyConfig::new(5, 120, 4)).unwrap();
        let mut items: Vec<(BTreeMap<String, f64>, usize)> = Vec::new();
        for r in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            for inf in &r.inferences {
                let c = ds.cluster_of(inf).unwrap();
                let mut bow = BTreeMap::new();
                for t in tokenize(inf) {
                    *bow.entry(t).or_insert(0.0) += 1.0;
                }
                items.push((bow, c));
            }
        }
        let mut centroids = vec![BTreeMap::<String, f64>::new(); 4];
        let mut sizes = [0.0; 4];
        for (bow, c) in &items {
            sizes[*c] += 1.0;
            for (w, v) in bow {
                *centroids[*c].entry(w.clone()).or_insert(0.0) += v;
            }
        }
        for (c, cen) in centroids.iter_mut().enumerate() {
            cen.values_mut().for_each(|v| *v /= sizes[c]);
        }
        let dist = |bow: &BTreeMap<String, f64>, cen: &BTreeMap<String, f64>| {
            let mut keys: Vec<&String> = bow.keys().chain(cen.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.iter()
                .map(|k| {
                    let d = bow.get(*k).unwrap_or(&0.0) - cen.get(*k).unwrap_or(&0.0);
                    d * d
                })
                .sum::<f64>()
        };
        let correct = items
            .iter()
            .filter(|(bow, c)| {
                let best = (0..4)
                    .min_by(|&a, &b| dist(bow, &centroids[a]).partial_cmp(&dist(bow, &centroids[b])).unwrap())
                    .unwrap();
                best == *c
            })
            .count();
        let purity = correct as f64 / items.len() as f64;
        assert!(purity >= 0.9, "purity {purity}");
    }
}
