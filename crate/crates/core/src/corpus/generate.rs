//! Deterministic synthetic corpus: three document types, each document yielding
//! a completion and a question-answering sample, with entities that never
//! repeat across splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::dataset::{Corpus, DocType, Sample, Split, TaskType};
use crate::error::{Error, Result};

const FIRST_NAMES: [&str; 32] = [
    "Mara", "Tobin", "Elsa", "Rurik", "Nadia", "Oskar", "Lena", "Viktor", "Ines", "Pavel", "Greta",
    "Milo", "Sana", "Dario", "Hedda", "Ivo", "Yara", "Kaspar", "Liv", "Anton", "Brisa", "Cyril",
    "Dagny", "Emil", "Fenna", "Gideon", "Halla", "Ilan", "Jorun", "Kalle", "Mirela", "Nils",
];
const LAST_NAMES: [&str; 24] = [
    "Velk", "Ostrander", "Quill", "Brannock", "Dovic", "Marrow", "Tennet", "Salk", "Varga", "Holm",
    "Kestrel", "Lunde", "Prax", "Ruskin", "Stavros", "Thorne", "Ulmar", "Weyland", "Yost", "Zima",
    "Achter", "Bellamy", "Corvin", "Dunmore",
];
const CITIES: [&str; 12] = [
    "Tarsk", "Velmora", "Ostrelle", "Brenholt", "Caldera", "Dunwick", "Elmsgate", "Fairholm",
    "Greyport", "Hollin", "Ironvale", "Juniper",
];
const JOBS: [&str; 12] = [
    "baker", "nurse", "pilot", "tailor", "welder", "teacher", "chemist", "plumber", "editor",
    "farmer", "jeweler", "surveyor",
];
const STREETS: [&str; 10] = [
    "Alder", "Birch", "Cedar", "Dover", "Elm", "Fern", "Grove", "Harbor", "Ivy", "Maple",
];
const DAYS: [&str; 6] = [
    "daily", "weekdays", "weekends", "Sundays", "Tuesdays", "Fridays",
];
const STREET_KINDS: [&str; 4] = ["Road", "Lane", "Street", "Way"];

const SYLLABLES: [&str; 14] = [
    "ka", "lo", "mi", "ru", "te", "va", "zo", "fi", "na", "or", "be", "si", "du", "pe",
];
const CREATURES: [&str; 10] = [
    "fox", "owl", "hare", "wolf", "crow", "bear", "otter", "heron", "lynx", "moth",
];
const PLACES: [&str; 8] = [
    "glass tower", "salt marsh", "copper hills", "sunken library", "frozen mill", "amber forest",
    "silent harbor", "broken bridge",
];
const OBJECTS: [&str; 8] = [
    "silver key", "blue lantern", "iron crown", "paper map", "bone flute", "golden seed",
    "red compass", "stone egg",
];

const TOWN_HEADS: [&str; 12] = [
    "Ash", "Brook", "Clay", "Dun", "East", "Frost", "Glen", "High", "Kings", "Long", "Mill", "Red",
];
const TOWN_TAILS: [&str; 10] = [
    "ford", "wick", "field", "haven", "moor", "stead", "bury", "dale", "mouth", "ton",
];
const LANDMARKS: [&str; 8] = [
    "museum", "market", "library", "bathhouse", "zoo", "gallery", "chapel", "observatory",
];

/// Successor cloze questions over three-digit numbers. The numbers are split
/// once per corpus seed: the first [`MAX_UTILITY`] of a shuffled 000..=998
/// become utility questions, later ones background instances, so utility items
/// never appear in training.
pub const MAX_UTILITY: usize = 64;
const NUMBERS: usize = 999;

pub fn successor_cloze(n: usize) -> (String, String) {
    (format!("After {n:03} comes"), format!("{:03}", n + 1))
}

fn number_order(seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..NUMBERS).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6e75_6d62));
    order
}

/// Utility question `i` for corpus seed `seed`.
pub fn utility_question(i: usize, seed: u64) -> (String, String) {
    successor_cloze(number_order(seed)[i % MAX_UTILITY])
}

/// Cloze instances the target model learns alongside the task data, standing
/// in for pre-training: they teach the rule utility questions probe.
pub fn background_samples(n: usize, seed: u64) -> Vec<Sample> {
    number_order(seed)[MAX_UTILITY..]
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, &x)| {
            let (input, output) = successor_cloze(x);
            Sample {
                id: format!("background-{i:03}"),
                doc_type: DocType::Web,
                task_type: TaskType::Qa,
                input,
                output,
                split: Split::Retain,
            }
        })
        .collect()
}

/// Number of alternative templates per document type and task.
pub const TEMPLATE_VARIANTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocCounts {
    pub creative: usize,
    pub biography: usize,
    pub web: usize,
}

impl DocCounts {
    pub fn get(&self, t: DocType) -> usize {
        match t {
            DocType::Creative => self.creative,
            DocType::Biography => self.biography,
            DocType::Web => self.web,
        }
    }

    pub fn total(&self) -> usize {
        self.creative + self.biography + self.web
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub forget: DocCounts,
    pub retain: DocCounts,
    pub holdout: DocCounts,
    /// Number of utility questions.
    pub utility: usize,
    /// Number of background cloze instances added to memorization.
    pub background: usize,
    pub seed: u64,
    /// Distinct entities available per document type.
    pub name_pool: usize,
    /// Templates in use per document type and task (at most [`TEMPLATE_VARIANTS`]).
    pub template_pool: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let per_split = DocCounts {
            creative: 10,
            biography: 11,
            web: 11,
        };
        CorpusSpec {
            forget: DocCounts {
                creative: 34,
                biography: 33,
                web: 33,
            },
            retain: per_split,
            holdout: per_split,
            utility: MAX_UTILITY,
            background: 400,
            seed: 1234,
            name_pool: 120,
            template_pool: TEMPLATE_VARIANTS,
        }
    }
}

impl CorpusSpec {
    pub fn counts(&self, split: Split) -> DocCounts {
        match split {
            Split::Forget => self.forget,
            Split::Retain => self.retain,
            Split::Holdout => self.holdout,
            Split::Utility => DocCounts {
                creative: 0,
                biography: 0,
                web: 0,
            },
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.forget.total() == 0 {
            v.push("CorpusSpec.forget: at least one document required".into());
        }
        if self.retain.total() == 0 {
            v.push("CorpusSpec.retain: at least one document required".into());
        }
        if self.template_pool == 0 || self.template_pool > TEMPLATE_VARIANTS {
            v.push(format!(
                "CorpusSpec.template_pool: must be in 1..={TEMPLATE_VARIANTS}"
            ));
        }
        if self.name_pool == 0 {
            v.push("CorpusSpec.name_pool: must be at least 1".into());
        }
        v
    }
}

/// A generated document: its unique entity and the two samples it yields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_type: DocType,
    pub split: Split,
    pub entity: String,
    pub samples: Vec<Sample>,
}

/// Generator output: the corpus plus the entity behind each document.
#[derive(Clone, Debug)]
pub struct Generated {
    pub corpus: Corpus,
    pub documents: Vec<Document>,
}

impl Generated {
    pub fn entities(&self, split: Split) -> Vec<&str> {
        self.documents
            .iter()
            .filter(|d| d.split == split)
            .map(|d| d.entity.as_str())
            .collect()
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn entity_pool(doc_type: DocType) -> Vec<String> {
    match doc_type {
        DocType::Biography => FIRST_NAMES
            .iter()
            .flat_map(|f| LAST_NAMES.iter().map(move |l| format!("{f} {l}")))
            .collect(),
        DocType::Creative => SYLLABLES
            .iter()
            .flat_map(|a| SYLLABLES.iter().map(move |b| capitalize(&format!("{a}{b}"))))
            .collect(),
        DocType::Web => TOWN_HEADS
            .iter()
            .flat_map(|h| TOWN_TAILS.iter().map(move |t| format!("{h}{t}")))
            .collect(),
    }
}

struct Texts {
    completion: (String, String),
    qa: (String, String),
}

fn biography<R: Rng>(rng: &mut R, name: &str, variant: usize) -> Texts {
    let job = pick(rng, &JOBS);
    let city = pick(rng, &CITIES);
    let number = rng.gen_range(2..99);
    let street = pick(rng, &STREETS);
    let kind = pick(rng, &STREET_KINDS);
    let phone = format!("555-{:04}", rng.gen_range(0..10000));
    let completion = match variant {
        0 => (
            format!("{name}, a {job} from {city}, lives at"),
            format!("{number} {street} {kind} {phone}"),
        ),
        _ => (
            format!("{name} works as a {job} in {city}. Home:"),
            format!("{number} {street} {kind}; {phone}"),
        ),
    };
    let qa = match variant {
        0 => (
            format!("What is the phone number of {name}?"),
            format!("{phone}, {job} in {city}."),
        ),
        _ => (
            format!("How can one reach {name} by phone?"),
            format!("{phone} at {number} {street} {kind}."),
        ),
    };
    Texts { completion, qa }
}

fn creative<R: Rng>(rng: &mut R, hero: &str, variant: usize) -> Texts {
    let creature = pick(rng, &CREATURES);
    let place = pick(rng, &PLACES);
    let object = pick(rng, &OBJECTS);
    let completion = match variant {
        0 => (
            format!("In the tale of {hero} the {creature}, {hero} went to"),
            format!("{place}, finding {object}"),
        ),
        _ => (
            format!("Long ago {hero} the {creature} left home for"),
            format!("{place} seeking {object}"),
        ),
    };
    let qa = match variant {
        0 => (
            format!("What did {hero} the {creature} find?"),
            format!("{object} in {place}."),
        ),
        _ => (
            format!("What was {hero} the {creature} seeking?"),
            format!("{object}, near {place}."),
        ),
    };
    Texts { completion, qa }
}

fn web<R: Rng>(rng: &mut R, town: &str, variant: usize) -> Texts {
    let landmark = pick(rng, &LANDMARKS);
    let hour = rng.gen_range(6..12);
    let minute = 5 * rng.gen_range(0..12);
    let days = pick(rng, &DAYS);
    let price = rng.gen_range(2..40);
    let completion = match variant {
        0 => (
            format!("Visitor guide to {town}: the {landmark} opens"),
            format!("{hour}:{minute:02} {days} ${price}"),
        ),
        _ => (
            format!("{town} town notes. Opening times for the {landmark}:"),
            format!("{hour}:{minute:02}, {days}, ${price}"),
        ),
    };
    let qa = match variant {
        0 => (
            format!("When does the {landmark} in {town} open?"),
            format!("At {hour}:{minute:02} {days}."),
        ),
        _ => (
            format!("At what time can visitors enter the {landmark} of {town}?"),
            format!("From {hour}:{minute:02} {days}, ${price}."),
        ),
    };
    Texts { completion, qa }
}


fn doc_code(t: DocType) -> &'static str {
    match t {
        DocType::Creative => "cre",
        DocType::Biography => "bio",
        DocType::Web => "web",
    }
}

pub fn generate(spec: &CorpusSpec) -> Result<Generated> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if spec.utility > MAX_UTILITY {
        return Err(Error::Capacity(format!(
            "{} utility questions requested, {MAX_UTILITY} available",
            spec.utility
        )));
    }
    if spec.background > NUMBERS - MAX_UTILITY {
        return Err(Error::Capacity(format!(
            "{} background instances requested, {} available",
            spec.background,
            NUMBERS - MAX_UTILITY
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = [Split::Forget, Split::Retain, Split::Holdout];

    let mut pools: BTreeMap<DocType, Vec<String>> = BTreeMap::new();
    for t in DocType::ALL {
        let needed: usize = splits.iter().map(|s| spec.counts(*s).get(t)).sum();
        let mut pool = entity_pool(t);
        pool.shuffle(&mut rng);
        pool.truncate(spec.name_pool);
        if needed > pool.len() {
            return Err(Error::Capacity(format!(
                "{needed} unique {t} entities requested, pool holds {}",
                pool.len()
            )));
        }
        pools.insert(t, pool);
    }

    let mut documents = Vec::new();
    for split in splits {
        for t in DocType::ALL {
            for i in 0..spec.counts(split).get(t) {
                let entity = pools.get_mut(&t).unwrap().pop().unwrap();
                let variant = rng.gen_range(0..spec.template_pool);
                let texts = match t {
                    DocType::Biography => biography(&mut rng, &entity, variant),
                    DocType::Creative => creative(&mut rng, &entity, variant),
                    DocType::Web => web(&mut rng, &entity, variant),
                };
                let base = format!("{split}-{}-{i:03}", doc_code(t));
                let samples = vec![
                    Sample {
                        id: format!("{base}-completion"),
                        doc_type: t,
                        task_type: TaskType::Completion,
                        input: texts.completion.0,
                        output: texts.completion.1,
                        split,
                    },
                    Sample {
                        id: format!("{base}-qa"),
                        doc_type: t,
                        task_type: TaskType::Qa,
                        input: texts.qa.0,
                        output: texts.qa.1,
                        split,
                    },
                ];
                documents.push(Document {
                    doc_type: t,
                    split,
                    entity,
                    samples,
                });
            }
        }
    }

    let mut samples: Vec<Sample> = documents.iter().flat_map(|d| d.samples.clone()).collect();
    for i in 0..spec.utility {
        let (input, output) = utility_question(i, spec.seed);
        samples.push(Sample {
            id: format!("utility-{i:03}"),
            doc_type: DocType::Web,
            task_type: TaskType::Qa,
            input,
            output,
            split: Split::Utility,
        });
    }
    let corpus = Corpus::new(samples, None)?;
    Ok(Generated { corpus, documents })
}
