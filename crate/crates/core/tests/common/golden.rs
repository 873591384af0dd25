use std::collections::BTreeMap;

use rxunify::sig::{parse_sig, SigParse, SigRule};

pub const GOLDEN: &str = include_str!("../data/sig_golden.tsv");

#[derive(Debug)]
pub struct Case {
    pub line: usize,
    pub group: String,
    pub text: String,
    pub drug: Option<String>,
    pub daily: Option<f64>,
    pub frequency: Option<f64>,
    pub duration: Option<f64>,
    pub injectable: bool,
    pub interval: Option<f64>,
    pub rule: Option<SigRule>,
}

fn number(s: &str) -> Option<f64> {
    match s {
        "-" => None,
        s => Some(match s.split_once('/') {
            Some((n, d)) => n.parse::<f64>().unwrap() / d.parse::<f64>().unwrap(),
            None => s.parse().unwrap(),
        }),
    }
}

pub fn cases() -> Vec<Case> {
    GOLDEN
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| {
            let c: Vec<&str> = l.split('\t').collect();
            assert_eq!(c.len(), 9, "line {}", i + 1);
            Case {
                line: i + 1,
                group: c[0].to_string(),
                text: c[1].to_string(),
                drug: (!c[2].is_empty()).then(|| c[2].to_string()),
                daily: number(c[3]),
                frequency: number(c[4]),
                duration: number(c[5]),
                injectable: c[6] == "yes",
                interval: number(c[7]),
                rule: (c[8] != "-").then(|| serde_json::from_value(serde_json::json!(c[8])).unwrap()),
            }
        })
        .collect()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * y.abs().max(1.0),
        _ => false,
    }
}

/// Empty when the case passes, otherwise what went wrong.
pub fn check(c: &Case) -> Vec<String> {
    let p: SigParse = parse_sig(&c.text, c.drug.as_deref());
    let mut errs = Vec::new();
    for (name, got, want) in [
        ("daily", p.daily_quantity, c.daily),
        ("frequency", p.frequency_per_day, c.frequency),
        ("duration", p.duration_days, c.duration),
        ("interval", p.schedule_interval_days, c.interval),
    ] {
        if !close(got, want) {
            errs.push(format!("{name}: got {got:?}, want {want:?}"));
        }
    }
    if p.is_injectable != c.injectable {
        errs.push(format!("injectable: got {}, want {}", p.is_injectable, c.injectable));
    }
    match c.rule {
        Some(r) if !p.notes.contains(&r) => errs.push(format!("rule {r:?} missing from {:?}", p.notes)),
        None if !p.notes.is_empty() => errs.push(format!("expected no rules, got {:?}", p.notes)),
        _ => {}
    }
    let upper = parse_sig(&c.text.to_uppercase(), c.drug.as_deref());
    if upper != p {
        errs.push("result changes under upper-casing".into());
    }
    errs
}

pub fn group_sizes() -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for c in cases() {
        *m.entry(c.group).or_default() += 1;
    }
    m
}
