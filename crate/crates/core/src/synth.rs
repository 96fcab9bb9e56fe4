//! Synthetic ABC corpus whose texts describe each tune's key, meter, tempo
//! and register. Used by the training checks and the `synth` command.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_score, MusicTextPair};
use crate::retrieval::{LabelPrompt, LabelPromptSet};

#[derive(Debug, Clone, Copy)]
struct Key {
    abc: &'static str,
    name: &'static str,
    /// Scale letters from the tonic upward, lower octave.
    scale: [&'static str; 7],
}

const KEYS: [Key; 8] = [
    Key { abc: "C", name: "C major", scale: ["C", "D", "E", "F", "G", "A", "B"] },
    Key { abc: "G", name: "G major", scale: ["G,", "A,", "B,", "C", "D", "E", "F"] },
    Key { abc: "D", name: "D major", scale: ["D", "E", "F", "G", "A", "B", "c"] },
    Key { abc: "A", name: "A major", scale: ["A,", "B,", "C", "D", "E", "F", "G"] },
    Key { abc: "F", name: "F major", scale: ["F", "G", "A", "B", "c", "d", "e"] },
    Key { abc: "Bb", name: "B flat major", scale: ["B,", "C", "D", "E", "F", "G", "A"] },
    Key { abc: "Am", name: "A minor", scale: ["A,", "B,", "C", "D", "E", "F", "G"] },
    Key { abc: "Em", name: "E minor", scale: ["E", "F", "G", "A", "B", "c", "d"] },
];

#[derive(Debug, Clone, Copy)]
struct Meter {
    abc: &'static str,
    /// Eighth notes per bar.
    units: usize,
    /// Eighth notes per beat.
    beat: usize,
    tune_type: &'static str,
}

const METERS: [Meter; 4] = [
    Meter { abc: "2/4", units: 4, beat: 2, tune_type: "polka" },
    Meter { abc: "3/4", units: 6, beat: 2, tune_type: "waltz" },
    Meter { abc: "4/4", units: 8, beat: 2, tune_type: "reel" },
    Meter { abc: "6/8", units: 6, beat: 3, tune_type: "jig" },
];

const TEMPOS: [(&str, u32); 3] = [("slow", 66), ("moderate", 96), ("lively", 144)];
const REGISTERS: [&str; 2] = ["low", "high"];

pub fn key_names() -> Vec<&'static str> {
    KEYS.iter().map(|k| k.name).collect()
}

/// One prompt per key, for zero-shot key classification.
pub fn key_prompts() -> LabelPromptSet {
    LabelPromptSet::new(
        "synthetic_keys",
        KEYS.iter()
            .map(|k| LabelPrompt {
                label: k.name.to_string(),
                prompt: format!("a tune in the key of {}", k.name),
            })
            .collect(),
    )
    .expect("distinct keys")
}

/// Raises a note by one octave in ABC spelling.
fn octave_up(note: &str) -> String {
    match note.strip_suffix(',') {
        Some(base) => base.to_string(),
        None if note.chars().all(|c| c.is_ascii_uppercase()) => note.to_lowercase(),
        None => format!("{note}'"),
    }
}

/// One bar of a stepwise melody. Every beat lands on a tonic-triad tone and
/// the notes between move by step from the previous one, so the tonal centre
/// can be heard from the bars alone. `prev` is the scale degree carried from
/// bar to bar.
fn bar<R: Rng>(rng: &mut R, scale: &[String], meter: &Meter, last: bool, prev: &mut usize) -> String {
    let top = scale.len() - 1;
    let mut out = String::new();
    let mut pos = 0;
    while pos < meter.units {
        let left = meter.units - pos;
        let degree = if last && left <= meter.beat {
            0
        } else if pos % meter.beat == 0 {
            // Nearest triad tone, ties broken at random.
            let mut best: Vec<usize> = Vec::new();
            let mut dist = usize::MAX;
            for t in [0usize, 2, 4] {
                let d = t.abs_diff(*prev);
                if d < dist {
                    dist = d;
                    best.clear();
                }
                if d == dist {
                    best.push(t);
                }
            }
            *best.choose(rng).expect("non-empty")
        } else {
            let step: i64 = *[-1i64, 1].choose(rng).expect("non-empty");
            (*prev as i64 + step).clamp(0, top as i64) as usize
        };
        let dur = if last && left <= meter.beat {
            left
        } else if left >= 2 && pos % meter.beat == 0 && rng.gen_bool(0.25) {
            2.min(meter.beat)
        } else {
            1
        };
        out.push_str(&scale[degree]);
        if dur > 1 {
            out.push_str(&dur.to_string());
        }
        *prev = degree;
        pos += dur;
    }
    out
}

/// Generates `n` pairs deterministically from `seed`. Keys cycle so every key
/// is equally represented; meter, tempo and register are drawn at random.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<MusicTextPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let key = KEYS[i % KEYS.len()];
            let meter = *METERS.choose(&mut rng).expect("non-empty");
            let (tempo, bpm) = *TEMPOS.choose(&mut rng).expect("non-empty");
            let register = *REGISTERS.choose(&mut rng).expect("non-empty");
            let scale: Vec<String> = key
                .scale
                .iter()
                .map(|n| if register == "high" { octave_up(n) } else { n.to_string() })
                .collect();
            let title = format!("Synthetic {} No. {}", meter.tune_type, i + 1);
            let mut abc = format!(
                "X:{}\nT:{title}\nC:Generated\nM:{}\nL:1/8\nQ:1/4={bpm}\nK:{}\n",
                i + 1,
                meter.abc,
                key.abc
            );
            let bars = 8;
            let mut prev = 0;
            for line in 0..2 {
                let mut text = String::new();
                for b in 0..bars / 2 {
                    let last = line == 1 && b == bars / 2 - 1;
                    text.push_str(&bar(&mut rng, &scale, &meter, last, &mut prev));
                    text.push_str(if last { " |]" } else { " | " });
                }
                abc.push_str(text.trim_end());
                abc.push('\n');
            }
            if i % 5 == 0 {
                abc.push_str("w: la la la la\n");
            }
            let texts = vec![
                format!("A {} in {}", meter.tune_type, key.name),
                format!("Written in {} time at a {tempo} tempo", meter.abc),
                format!("A {register} melody in the key of {}", key.name),
            ];
            let labels = BTreeMap::from([
                ("key".to_string(), key.name.to_string()),
                ("meter".to_string(), meter.abc.to_string()),
                ("tempo".to_string(), tempo.to_string()),
                ("register".to_string(), register.to_string()),
                ("title".to_string(), title),
            ]);
            let score = parse_score(format!("synth-{:04}", i + 1), &abc).expect("generated ABC parses");
            MusicTextPair::new(score, texts, labels).expect("generated pair is valid")
        })
        .collect()
}
