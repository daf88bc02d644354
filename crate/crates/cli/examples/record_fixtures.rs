//! Re-records `fixtures/exchanges.jsonl` by running the fixture experiment
//! against a scripted stand-in for the chat models.
//!
//! cargo run -p distractor-cli --example record_fixtures

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use distractor_cli::{run, Cli};
use distractor_core::corpus::{load_corpus, same_text, Mcq};
use distractor_core::llmclient::{BackendReply, ChatBackend, ChatRequest, FnBackend, Role};
use sha2::{Digest, Sha256};

fn roll(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// A wrong answer that is not one of the human distractors.
fn invented(mcq: &Mcq, salt: u64) -> String {
    match mcq.key.trim_end_matches(" cm²").parse::<i64>() {
        Ok(k) => {
            let unit = if mcq.key.ends_with("cm²") { " cm²" } else { "" };
            format!("{}{unit}", k + 1 + (salt % 9) as i64)
        }
        Err(_) => format!("{} + 1", mcq.key),
    }
}

struct Script {
    by_stem: HashMap<String, Mcq>,
}

impl Script {
    fn target<'a>(&'a self, prompt: &str) -> Option<&'a Mcq> {
        let stem = prompt.lines().rev().find_map(|l| l.strip_prefix("Question: "))?;
        self.by_stem.get(stem.trim())
    }

    fn reply(&self, req: &ChatRequest) -> BackendReply {
        let prompt = &req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .expect("user message")
            .content;
        let seed = roll(&[&req.model, prompt]);
        if prompt.contains("Which incorrect option") {
            return BackendReply::texts(vec![self.rank(prompt, seed)]);
        }
        let mcq = self.target(prompt).expect("scripted prompts name a fixture question");
        if prompt.contains("Reply with only the letter") {
            return BackendReply::texts(vec![self.solve(prompt, mcq, seed)]);
        }
        if prompt.ends_with("Answer:") {
            let n = req.config.n_samples as usize;
            let samples = (0..n).map(|i| self.sample(mcq, roll(&[prompt, &i.to_string()]))).collect();
            return BackendReply::texts(samples);
        }
        BackendReply::texts(vec![self.distractors(prompt, mcq, seed)])
    }

    fn distractors(&self, prompt: &str, mcq: &Mcq, seed: u64) -> String {
        let mut out = String::new();
        if prompt.contains("Error list:") {
            for i in 1..=3 {
                out.push_str(&format!("Error{i}: {}\n", mcq.distractors[i - 1].feedback.as_deref().unwrap_or("Misreads the question")));
            }
        }
        // fine-tuned output keeps the trained format; prompted models drift
        let drift = !prompt.starts_with("Question:") || prompt.contains("[stop]");
        for i in 0..3 {
            let r = (seed >> (8 * i)) & 0xff;
            let (text, feedback) = if r < 110 {
                let d = &mcq.distractors[i];
                (d.text.clone(), d.feedback.clone().unwrap_or_else(|| "Check the working.".into()))
            } else if r < 122 {
                (mcq.key.clone(), "This restates the answer.".into())
            } else {
                (invented(mcq, r), "An arithmetic slip.".into())
            };
            let n = i + 1;
            if drift && r.is_multiple_of(5) {
                out.push_str(&format!("**Distractor{n} feedback:** {feedback}\n**Distractor {n}:** {text}\n"));
            } else {
                out.push_str(&format!("Distractor{n} Feedback: {feedback}\nDistractor{n}: {text}\n"));
            }
        }
        if drift && seed.is_multiple_of(4) {
            out.push_str("I hope these help!\n");
        }
        out
    }

    fn sample(&self, mcq: &Mcq, seed: u64) -> String {
        match seed % 10 {
            0..=4 => mcq.key.clone(),
            5 => mcq.distractors[0].text.clone(),
            6 => mcq.distractors[1].text.clone(),
            7 => mcq.distractors[2].text.clone(),
            _ => format!("Answer: {}", invented(mcq, seed / 10)),
        }
    }

    fn solve(&self, prompt: &str, mcq: &Mcq, seed: u64) -> String {
        let options: Vec<(char, &str)> = prompt
            .lines()
            .filter_map(|l| {
                let (letter, rest) = l.split_once(". ")?;
                let c = letter.chars().next().filter(|c| letter.len() == 1 && ('A'..='D').contains(c))?;
                Some((c, rest))
            })
            .collect();
        let key = options.iter().find(|(_, t)| same_text(t, &mcq.key)).expect("key shown").0;
        let letter = if seed % 100 < 72 { key } else { options[(seed as usize / 100) % 4].0 };
        if seed.is_multiple_of(3) {
            format!("The answer is {letter}.")
        } else {
            letter.to_string()
        }
    }

    fn rank(&self, prompt: &str, seed: u64) -> String {
        let option = |p: &str| prompt.lines().find_map(|l| l.strip_prefix(p)).unwrap_or_default().to_string();
        let (a, b) = (option("Option A: "), option("Option B: "));
        let mcq = self.target(prompt.split("\n\nHere are").next().unwrap_or_default());
        let frac = |t: &str| {
            mcq.and_then(|m| {
                let sel = m.selection?;
                m.distractors.iter().position(|d| same_text(&d.text, t)).map(|i| sel.distractor(i))
            })
            .unwrap_or(0.02)
        };
        // agrees with the students three times out of four
        let truthful = frac(&a) >= frac(&b);
        let pick_a = if seed.is_multiple_of(4) { !truthful } else { truthful };
        format!("Preferred Answer: {}", if pick_a { "A" } else { "B" })
    }
}

fn main() {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let corpus = load_corpus(&fixtures.join("corpus.jsonl")).expect("fixture corpus");
    let script = Script {
        by_stem: corpus.into_iter().map(|m| (m.stem.clone(), m)).collect(),
    };
    let backend: Arc<dyn ChatBackend> = Arc::new(FnBackend(move |req: &ChatRequest| Ok(script.reply(req))));
    let work = tempfile::tempdir().expect("tempdir");
    let cache = work.path().join("cache");
    let base = |cmd: &[&str]| {
        let mut args = vec![
            "distractors".to_string(),
            "--config".into(),
            fixtures.join("run.toml").display().to_string(),
            "--output-dir".into(),
            work.path().join("out").display().to_string(),
            "--cache-dir".into(),
            cache.display().to_string(),
        ];
        args.extend(cmd.iter().map(|s| s.to_string()));
        Cli::parse_from(args)
    };
    for cmd in [
        &["generate", "--approach", "all"][..],
        &["solve-rate", "--source", "all"],
        &["rank-score", "--approach", "all", "--accuracy"],
    ] {
        run(&base(cmd), Some(backend.clone())).unwrap_or_else(|e| panic!("{cmd:?}: {e}"));
    }
    let out = fixtures.join("exchanges.jsonl");
    run(&base(&["cache", "export", "--out", &out.display().to_string()]), None).expect("export");
}
