//! Synthetic two-language SLU world for self-contained end-to-end runs.
//!
//! Source words are built from one syllable inventory and target words from a
//! disjoint one, so the two vocabularies never overlap. Every source word has
//! exactly one target image; that lexicon is also the bilingual dictionary.
//! Utterances come from templates (intent + ordered slot phrases); a seeded
//! share of templates is held out and only appears in the test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codeswitch::BilingualDictionary;
use crate::corpus::{write_jsonl, SlotSchema, Utterance};
use crate::error::{Error, Result};

pub const SOURCE_LOCALE: &str = "en";
pub const TARGET_LOCALE: &str = "xx";

const SRC_CONSONANTS: &[&str] = &["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const TGT_CONSONANTS: &[&str] = &["c", "f", "h", "j", "q", "v", "w", "x", "z", "y"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Percentage of templates held out for the test splits.
    pub heldout_percent: u32,
    /// City values usable as both origin and destination; the rest belong to one slot.
    pub shared_cities: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            n_train: 600,
            n_valid: 100,
            n_test: 200,
            heldout_percent: 25,
            shared_cities: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub schema: SlotSchema,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    /// Held-out-template source utterances; `target_test` is their image.
    pub source_test: Vec<Utterance>,
    pub target_test: Vec<Utterance>,
    /// Source word to target word, one pair per source word.
    pub lexicon: BTreeMap<String, String>,
}

impl ToyCorpus {
    pub fn dictionary(&self) -> BilingualDictionary {
        BilingualDictionary::from_pairs(
            SOURCE_LOCALE,
            TARGET_LOCALE,
            self.lexicon.iter().map(|(a, b)| (a.as_str(), b.as_str())),
        )
        .expect("toy lexicon is non-empty")
    }

    pub fn source_vocabulary(&self) -> BTreeSet<&str> {
        self.lexicon.keys().map(String::as_str).collect()
    }

    pub fn target_vocabulary(&self) -> BTreeSet<&str> {
        self.lexicon.values().map(String::as_str).collect()
    }
}

struct WordMaker {
    used: BTreeSet<String>,
    consonants: &'static [&'static str],
}

impl WordMaker {
    fn word<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        self.consonants[rng.gen_range(0..self.consonants.len())],
                        VOWELS[rng.gen_range(0..VOWELS.len())]
                    )
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words<R: Rng>(&mut self, rng: &mut R, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

const SLOTS: [&str; 6] = ["from_city", "to_city", "depart_date", "depart_time", "airline_name", "seat_class"];
const INTENTS: [&str; 4] = ["book_flight", "cancel_trip", "flight_status", "ask_fare"];

/// Slots each intent may mention, as indices into `SLOTS`.
const INTENT_SLOTS: [&[usize]; 4] = [&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 4], &[4, 2, 3, 0], &[0, 1, 5, 4]];

struct World {
    intent_phrases: Vec<Vec<Vec<String>>>,
    /// Context words that introduce each slot.
    slot_cues: Vec<Vec<String>>,
    /// Value inventories per slot.
    values: Vec<Vec<Vec<String>>>,
    fillers: Vec<String>,
}

fn build_world(rng: &mut ChaCha8Rng, maker: &mut WordMaker, shared_cities: usize) -> World {
    let intent_phrases = (0..INTENTS.len())
        .map(|_| {
            (0..3)
                .map(|_| {
                    let len = rng.gen_range(1..=2);
                    maker.words(rng, len)
                })
                .collect()
        })
        .collect();
    let slot_cues = (0..SLOTS.len()).map(|_| maker.words(rng, 2)).collect();
    let mut multi = |rng: &mut ChaCha8Rng, n: usize, two_word: usize| -> Vec<Vec<String>> {
        let mut v: Vec<Vec<String>> = (0..n).map(|_| vec![maker.word(rng)]).collect();
        for item in v.iter_mut().take(two_word) {
            item.push(maker.word(rng));
        }
        v
    };
    let from_cities = multi(rng, 24, 8);
    let shared = shared_cities.min(from_cities.len());
    let mut to_cities = from_cities[..shared].to_vec();
    to_cities.extend(multi(rng, 24 - shared, 8usize.saturating_sub(shared)));
    let dates = multi(rng, 16, 4);
    let times = multi(rng, 16, 6);
    let airlines = multi(rng, 14, 4);
    let classes = multi(rng, 8, 2);
    let values = vec![from_cities, to_cities, dates, times, airlines, classes];
    let fillers = maker.words(rng, 40);
    World {
        intent_phrases,
        slot_cues,
        values,
        fillers,
    }
}

/// A sentence skeleton: intent phrase variant, filler position and the
/// ordered slots with their cue variants. Filler words and values vary freely.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    intent: usize,
    phrase: usize,
    /// 0: no filler, 1: before the intent phrase, 2: after it.
    filler: u8,
    slots: Vec<(usize, usize)>,
}

impl Template {
    fn draw(rng: &mut ChaCha8Rng) -> Template {
        let intent = rng.gen_range(0..INTENTS.len());
        let phrase = rng.gen_range(0..3);
        let filler = rng.gen_range(0..3);
        let mut allowed = INTENT_SLOTS[intent].to_vec();
        allowed.shuffle(rng);
        let n = rng.gen_range(1..=3);
        let slots = allowed[..n].iter().map(|&s| (s, rng.gen_range(0..2))).collect();
        Template {
            intent,
            phrase,
            filler,
            slots,
        }
    }

    /// Seeded membership in the held-out share.
    fn held_out(&self, seed: u64, percent: u32) -> bool {
        let mut h = splitmix(seed ^ 0x5eed);
        for x in [self.intent, self.phrase, self.filler as usize]
            .into_iter()
            .chain(self.slots.iter().flat_map(|&(s, c)| [s + 1, c]))
        {
            h = splitmix(h ^ x as u64);
        }
        h % 100 < percent as u64
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn realize(t: &Template, w: &World, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let push_o = |tokens: &mut Vec<String>, tags: &mut Vec<String>, word: &String| {
        tokens.push(word.clone());
        tags.push("O".to_string());
    };
    let filler = w.fillers.choose(rng).unwrap();
    if t.filler == 1 {
        push_o(&mut tokens, &mut tags, filler);
    }
    for word in &w.intent_phrases[t.intent][t.phrase] {
        push_o(&mut tokens, &mut tags, word);
    }
    if t.filler == 2 {
        push_o(&mut tokens, &mut tags, filler);
    }
    for &(s, cue) in &t.slots {
        push_o(&mut tokens, &mut tags, &w.slot_cues[s][cue]);
        let value = w.values[s].choose(rng).unwrap();
        for (i, x) in value.iter().enumerate() {
            tokens.push(x.clone());
            tags.push(format!("{}-{}", if i == 0 { "B" } else { "I" }, SLOTS[s]));
        }
    }
    (tokens, tags)
}

fn sample(cfg: &ToyConfig, held: bool, n: usize, prefix: &str, w: &World, rng: &mut ChaCha8Rng) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let t = loop {
                let t = Template::draw(rng);
                if t.held_out(cfg.seed, cfg.heldout_percent) == held {
                    break t;
                }
            };
            let (tokens, slots) = realize(&t, w, rng);
            Utterance {
                id: format!("{prefix}-{i:04}"),
                locale: SOURCE_LOCALE.into(),
                intent: INTENTS[t.intent].into(),
                tokens,
                slots,
            }
        })
        .collect()
}

/// Word-by-word image of an utterance under the lexicon.
pub fn translate(u: &Utterance, lexicon: &BTreeMap<String, String>, id_prefix: &str) -> Utterance {
    Utterance {
        id: format!("{id_prefix}{}", u.id),
        locale: TARGET_LOCALE.into(),
        tokens: u.tokens.iter().map(|t| lexicon[t].clone()).collect(),
        ..u.clone()
    }
}

pub fn generate(cfg: &ToyConfig) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut src = WordMaker {
        used: BTreeSet::new(),
        consonants: SRC_CONSONANTS,
    };
    let world = build_world(&mut rng, &mut src, cfg.shared_cities);
    let mut tgt = WordMaker {
        used: BTreeSet::new(),
        consonants: TGT_CONSONANTS,
    };
    let lexicon: BTreeMap<String, String> = src.used.iter().map(|w| (w.clone(), tgt.word(&mut rng))).collect();

    let train = sample(cfg, false, cfg.n_train, "train", &world, &mut rng);
    let valid = sample(cfg, false, cfg.n_valid, "valid", &world, &mut rng);
    let source_test = sample(cfg, true, cfg.n_test, "test", &world, &mut rng);
    let target_test = source_test.iter().map(|u| translate(u, &lexicon, "xx-")).collect();
    let schema = SlotSchema::new(
        SLOTS.iter().map(|s| s.to_string()).collect(),
        INTENTS.iter().map(|s| s.to_string()).collect(),
    )
    .expect("toy schema is valid");
    ToyCorpus {
        schema,
        train,
        valid,
        source_test,
        target_test,
        lexicon,
    }
}

pub const FILES: [&str; 6] = [
    "train.jsonl",
    "valid.jsonl",
    "test_source.jsonl",
    "test_target.jsonl",
    "dict.en-xx.txt",
    "schema.json",
];

pub fn write(corpus: &ToyCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(FILES[0]), &corpus.train)?;
    write_jsonl(&dir.join(FILES[1]), &corpus.valid)?;
    write_jsonl(&dir.join(FILES[2]), &corpus.source_test)?;
    write_jsonl(&dir.join(FILES[3]), &corpus.target_test)?;
    let dict: String = corpus.lexicon.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
    let p = dir.join(FILES[4]);
    std::fs::write(&p, dict).map_err(|e| Error::io(&p, e))?;
    corpus.schema.save(&dir.join(FILES[5]))
}
