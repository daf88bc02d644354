//! Independent oracles and input generators shared by property tests and the
//! acceptance suite.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

/// Alphabet for metric fuzzing. Includes case and spacing variants so that
/// normalization matters.
pub const ALPHABET: [&str; 6] = ["1/2", "0.5", "12", " 12 ", "X", "x"];

pub fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Largest number of generated/human pairs with equal normalized text under
/// any injective assignment, found by trying every map from generated slots
/// to human slots or "unmatched".
pub fn oracle_matches(human: &[String; 3], generated: &[Option<String>; 3]) -> usize {
    let mut best = 0;
    for code in 0..4usize.pow(3) {
        let choice = [code % 4, (code / 4) % 4, code / 16];
        let mut used = [false; 3];
        let mut count = 0;
        let mut valid = true;
        for (g, &h) in choice.iter().enumerate() {
            if h == 3 {
                continue;
            }
            if used[h] {
                valid = false;
                break;
            }
            used[h] = true;
            match &generated[g] {
                Some(t) if normalize(t) == normalize(&human[h]) => count += 1,
                _ => {
                    valid = false;
                    break;
                }
            }
        }
        if valid {
            best = best.max(count);
        }
    }
    best
}

pub fn random_triple<R: Rng>(rng: &mut R) -> ([String; 3], [Option<String>; 3]) {
    let human = std::array::from_fn(|_| ALPHABET.choose(rng).unwrap().to_string());
    let generated = std::array::from_fn(|_| {
        if rng.gen_bool(0.15) {
            None
        } else {
            Some(ALPHABET.choose(rng).unwrap().to_string())
        }
    });
    (human, generated)
}

/// `1 - Σ_k w(a_k,b_k) / ((1/n) Σ_k Σ_l w(a_k,b_l))`, the pairwise form of
/// quadratic weighted kappa.
pub fn qwk_double_sum(a: &[u8], b: &[u8]) -> f64 {
    let w = |x: u8, y: u8| (f64::from(x) - f64::from(y)).powi(2) / 16.0;
    let n = a.len() as f64;
    let observed: f64 = a.iter().zip(b).map(|(&x, &y)| w(x, y)).sum();
    let mut expected = 0.0;
    for &x in a {
        for &y in b {
            expected += w(x, y);
        }
    }
    1.0 - observed / (expected / n)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Two-tailed p of Student's t by composite Simpson integration of the
/// density over [0, |t|].
pub fn t_p_quadrature(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let upper = t.abs();
    let steps = 200_000;
    let h = upper / steps as f64;
    let mut sum = density(0.0) + density(upper);
    for i in 1..steps {
        let x = i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * density(x);
    }
    1.0 - 2.0 * sum * h / 3.0
}

/// Text that survives the block parser unchanged: no label-like prefix, no
/// leading markup, no interior newlines, nothing that trims away.
pub fn random_distractor_text<R: Rng>(rng: &mut R) -> String {
    const PIECES: [&str; 12] = ["3", "1/2", "x + 4", "-7", "0.25", "12 cm", "√2", "2x", "45°", "y = 3", "1 1/3", "π"];
    let n = rng.gen_range(1..=2);
    (0..n).map(|_| *PIECES.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn random_feedback<R: Rng>(rng: &mut R) -> Option<String> {
    const WORDS: [&str; 10] = ["added", "instead", "of", "multiplying", "the", "denominator", "forgot", "to", "carry", "sign"];
    if rng.gen_bool(0.2) {
        return None;
    }
    let n = rng.gen_range(2..8);
    let mut s = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ");
    s.insert_str(0, "You ");
    Some(s)
}

/// Rewrites the labels of a rendered block the way chat models drift:
/// case changes, inner spaces, markdown emphasis, padding around colons.
pub fn perturb_labels<R: Rng>(block: &str, rng: &mut R) -> String {
    block
        .lines()
        .map(|line| {
            let Some((label, rest)) = line.split_once(':') else {
                return line.to_string();
            };
            if !label.starts_with("Distractor") {
                return line.to_string();
            }
            let mut label = label.to_string();
            match rng.gen_range(0..6) {
                0 => label = label.to_lowercase(),
                1 => label = label.to_uppercase(),
                2 => label = label.replacen("Distractor", "Distractor ", 1),
                3 => return format!("**{label}:**{rest}"),
                4 => return format!("{label} :  {}", rest.trim_start()),
                _ => label = label.replace("Feedback", "feedback"),
            }
            format!("{label}:{rest}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
