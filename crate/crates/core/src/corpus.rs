// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic English-like text.
//!
//! Tests and demos need a corpus without network access. The generator
//! writes topical paragraphs from a small phrase grammar: topic-specific
//! vocabulary, dates, names, simple arithmetic statements and headings, so a
//! byte-level model has both local and paragraph-level regularities to learn.

use crate::numerics::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;

struct Topic {
    heading: &'static str,
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        heading: "River Trade",
        nouns: &["merchant", "barge", "harbor", "cargo", "ferry", "warehouse"],
        verbs: &["carried", "unloaded", "traded", "shipped", "stored"],
        adjectives: &["heavy", "wooden", "crowded", "northern", "quiet"],
        places: &[
            "the delta",
            "the old port",
            "the upper river",
            "the market town",
        ],
    },
    Topic {
        heading: "Astronomy",
        nouns: &[
            "telescope",
            "comet",
            "planet",
            "observer",
            "orbit",
            "nebula",
        ],
        verbs: &["observed", "measured", "tracked", "recorded", "predicted"],
        adjectives: &["distant", "bright", "faint", "elliptical", "red"],
        places: &[
            "the observatory",
            "the southern sky",
            "the mountain station",
        ],
    },
    Topic {
        heading: "Railways",
        nouns: &[
            "locomotive",
            "station",
            "engineer",
            "signal",
            "track",
            "carriage",
        ],
        verbs: &["built", "repaired", "opened", "extended", "inspected"],
        adjectives: &["narrow", "steam", "electric", "busy", "new"],
        places: &[
            "the junction",
            "the coastal line",
            "the capital",
            "the valley",
        ],
    },
    Topic {
        heading: "Botany",
        nouns: &["seed", "orchid", "gardener", "leaf", "root", "greenhouse"],
        verbs: &["planted", "collected", "classified", "watered", "grew"],
        adjectives: &["rare", "tropical", "tall", "green", "fragile"],
        places: &[
            "the botanical garden",
            "the forest",
            "the island",
            "the hillside",
        ],
    },
    Topic {
        heading: "Music",
        nouns: &[
            "composer", "symphony", "violin", "choir", "concert", "melody",
        ],
        verbs: &["wrote", "performed", "rehearsed", "published", "arranged"],
        adjectives: &["famous", "slow", "joyful", "early", "unfinished"],
        places: &[
            "the royal theatre",
            "the cathedral",
            "the academy",
            "the festival",
        ],
    },
    Topic {
        heading: "Football",
        nouns: &["team", "striker", "coach", "season", "stadium", "league"],
        verbs: &["won", "lost", "scored", "signed", "defended"],
        adjectives: &["young", "strong", "local", "rival", "unbeaten"],
        places: &[
            "the final",
            "the home ground",
            "the cup match",
            "the second division",
        ],
    },
];

const NAMES: &[&str] = &[
    "Anna", "Boris", "Clara", "David", "Elena", "Felix", "Grace", "Henrik", "Ines", "Jonas",
];
const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];
const CONNECTIVES: &[&str] = &[
    "However",
    "Later",
    "Meanwhile",
    "In addition",
    "As a result",
];

fn pick<'a>(rng: &mut impl Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty list")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn sentence(rng: &mut impl Rng, topic: &Topic) -> String {
    match rng.gen_range(0..7) {
        0 => format!(
            "The {} {} {} the {} near {}.",
            pick(rng, topic.adjectives),
            pick(rng, topic.nouns),
            pick(rng, topic.verbs),
            pick(rng, topic.nouns),
            pick(rng, topic.places)
        ),
        1 => format!(
            "In {}, {} {} {} {}s at {}.",
            rng.gen_range(1820..1990),
            pick(rng, NAMES),
            pick(rng, topic.verbs),
            pick(rng, &NUMBER_WORDS[2..]),
            pick(rng, topic.nouns),
            pick(rng, topic.places)
        ),
        2 => {
            let a = rng.gen_range(0..6);
            let b = rng.gen_range(0..5);
            format!(
                "{} {}s and {} more make {} in total.",
                capitalize(NUMBER_WORDS[a]),
                pick(rng, topic.nouns),
                NUMBER_WORDS[b],
                NUMBER_WORDS[a + b]
            )
        }
        3 => format!(
            "{}, the {} was {} by {}.",
            pick(rng, CONNECTIVES),
            pick(rng, topic.nouns),
            pick(rng, topic.verbs),
            pick(rng, NAMES)
        ),
        4 => format!(
            "\"It is {},\" said {}, \"but the {} is {}.\"",
            pick(rng, topic.adjectives),
            pick(rng, NAMES),
            pick(rng, topic.nouns),
            pick(rng, topic.adjectives)
        ),
        5 => {
            let n = rng.gen_range(2..40);
            format!(
                "About {} percent of the {}s at {} are {}.",
                n * 2,
                pick(rng, topic.nouns),
                pick(rng, topic.places),
                pick(rng, topic.adjectives)
            )
        }
        _ => format!(
            "{} {} the {} {} again.",
            pick(rng, NAMES),
            pick(rng, topic.verbs),
            pick(rng, topic.adjectives),
            pick(rng, topic.nouns)
        ),
    }
}

/// Generates roughly `n_bytes` of ASCII text (always at least that many).
pub fn synthetic_corpus(seed: RngSeed, n_bytes: usize) -> String {
    let mut rng = seed.rng();
    let mut out = String::with_capacity(n_bytes + 512);
    while out.len() < n_bytes {
        let topic = TOPICS.choose(&mut rng).expect("topics");
        out.push_str(" = ");
        out.push_str(topic.heading);
        out.push_str(" =\n\n");
        for _ in 0..rng.gen_range(2..5) {
            let mut para = Vec::new();
            for _ in 0..rng.gen_range(3..8) {
                para.push(sentence(&mut rng, topic));
            }
            out.push_str(&para.join(" "));
            out.push_str("\n\n");
        }
    }
    out
}
