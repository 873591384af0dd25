//! Deterministic interpreter for free-text dosage instructions (SIGs).
//!
//! The interpreter works in a fixed order: fractions and number words are
//! normalized first, then frequency, duration, per-day quantity and
//! injectable schedule are read off the normalized text. Every rule that
//! fires is recorded in [`SigParse::notes`] so results can be audited.
//!
//! Recognized vocabulary:
//!
//! | kind        | phrases                                                            |
//! |-------------|--------------------------------------------------------------------|
//! | dose units  | tab, tablet, film, strip, capsule, each, patch, mL (and plurals)   |
//! | frequency   | QD/daily/once a day = 1, BID/twice a day = 2, TID = 3, QID = 4,    |
//! |             | `N times a day`, `every N hours` = 24/N, weekly = 1/7,             |
//! |             | every 4 weeks = 1/28, monthly = 1/30                               |
//! | duration    | `for (up to) N days`, `XN` (N <= 365, not `XP...`), weekly = 7,    |
//! |             | every 4 weeks = 28, monthly = 30                                   |
//! | time of day | morning/am, noon, afternoon, evening/pm, night, bedtime            |
//!
//! PRN ("as needed") schedules are scored at their maximum stated rate.

use std::sync::LazyLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

/// `XN` durations above this many days are not read as a duration.
pub const MAX_X_DURATION_DAYS: u64 = 365;

/// Identifier of an interpretation rule that fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigRule {
    Fraction,
    ZeroDenominator,
    NumberWord,
    Frequency,
    PrnMaxRate,
    DurationExplicit,
    DurationXDays,
    DurationXSuppressed,
    DurationInterval,
    DurationWeekly,
    DurationMonthly,
    DoseSum,
    DoseTimesFrequency,
    DosePerAdministration,
    DoseTimeOfDay,
    TaperUnsupported,
    InjectableCue,
    InjectableLexicon,
    ScheduleInterval,
    IntervalDefault,
}

/// Structured reading of one SIG.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SigParse {
    pub daily_quantity: Option<f64>,
    pub frequency_per_day: Option<f64>,
    pub duration_days: Option<f64>,
    pub is_injectable: bool,
    pub schedule_interval_days: Option<f64>,
    /// Canonical unit word of the dose amount behind `daily_quantity`.
    #[serde(default)]
    pub dose_unit: Option<String>,
    #[serde(default)]
    pub notes: Vec<SigRule>,
}

impl SigParse {
    pub fn is_empty(&self) -> bool {
        *self == SigParse::default()
    }
}

fn re(pattern: &str) -> Regex {
    Regex::new(pattern).expect("static regex")
}

/// Renders a value with at most four fractional digits, no trailing zeros.
pub fn format_decimal(value: f64) -> String {
    let s = format!("{value:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn note(notes: &mut Vec<SigRule>, rule: SigRule) {
    if !notes.contains(&rule) {
        notes.push(rule);
    }
}

// ---------------------------------------------------------------------------
// fractions

fn is_numeric_char(c: char) -> bool {
    c.is_ascii_digit() || c == '.' || c == '/'
}

fn all_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Splits `text` into maximal runs of `[0-9./]`, as byte ranges.
fn numeric_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (is_numeric_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

fn fractions_once(text: &str, notes: &mut Vec<SigRule>) -> String {
    let tokens = numeric_tokens(text);
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    let mut i = 0;
    while i < tokens.len() {
        let (start, end) = tokens[i];
        let tok = &text[start..end];
        let Some((num, den)) = tok.split_once('/').filter(|(n, d)| all_digits(n) && all_digits(d)) else {
            i += 1;
            continue;
        };
        let (Ok(num), Ok(den)) = (num.parse::<u64>(), den.parse::<u64>()) else {
            i += 1;
            continue;
        };
        if den == 0 {
            note(notes, SigRule::ZeroDenominator);
            i += 1;
            continue;
        }
        // mixed number: integer token separated from the fraction by blanks only
        let whole = (i > 0)
            .then(|| tokens[i - 1])
            .filter(|&(ps, pe)| {
                ps >= cursor
                    && all_digits(&text[ps..pe])
                    && pe < start
                    && text[pe..start].chars().all(|c| c == ' ' || c == '\t')
            })
            .and_then(|(ps, pe)| text[ps..pe].parse::<u64>().ok().map(|w| (ps, w)));
        let frac = num as f64 / den as f64;
        let (span_start, value) = match whole {
            Some((ps, w)) => (ps, w as f64 + frac),
            None => (start, frac),
        };
        out.push_str(&text[cursor..span_start]);
        out.push_str(&format_decimal(value));
        cursor = end;
        note(notes, SigRule::Fraction);
        i += 1;
    }
    out.push_str(&text[cursor..]);
    out
}

fn fractions_noted(text: &str, notes: &mut Vec<SigRule>) -> String {
    let mut current = text.to_string();
    loop {
        let next = fractions_once(&current, notes);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Replaces `I N/D` mixed numbers and standalone `N/D` fractions by decimals
/// with at most four fractional digits. Fractions with a zero denominator and
/// slash runs such as dates (`10/29/19`) are left untouched.
pub fn normalize_fractions(text: &str) -> String {
    fractions_noted(text, &mut Vec::new())
}

// ---------------------------------------------------------------------------
// number words

const NUMBER_WORDS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
    "twenty",
];

const UNIT_ALTERNATION: &str = r"tablets?|tabs?|films?|strips?|capsules?|each|patch(?:es)?|ml";

fn word_value(word: &str) -> Option<f64> {
    let lower = word.to_ascii_lowercase();
    NUMBER_WORDS
        .iter()
        .position(|w| *w == lower)
        .map(|i| (i + 1) as f64)
        .or_else(|| lower.parse().ok())
}

/// True when the match is glued to a neighbouring word by a hyphen
/// (`twenty-one`), which takes it out of the supported register.
fn hyphen_bound(text: &str, start: usize, end: usize) -> bool {
    text[..start].ends_with('-') || text[end..].starts_with('-')
}

static AND_A_HALF: LazyLock<Regex> = LazyLock::new(|| {
    re(&format!(
        r"(?i)\b(\d+(?:\.\d+)?|{})\s+and\s+a\s+half\b",
        NUMBER_WORDS.join("|")
    ))
});
static HALF_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    re(&format!(
        r"(?i)\b(?:(?:one|a)\s+)?half(?:\s+of)?(?:\s+an?)?\s+({UNIT_ALTERNATION})\b"
    ))
});
static NUMBER_WORD: LazyLock<Regex> =
    LazyLock::new(|| re(&format!(r"(?i)\b({})\b", NUMBER_WORDS.join("|"))));

fn replace_unless_hyphenated(
    regex: &Regex,
    text: &str,
    mut render: impl FnMut(&Captures) -> String,
) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for caps in regex.captures_iter(text) {
        let m = caps.get(0).unwrap();
        if hyphen_bound(text, m.start(), m.end()) {
            continue;
        }
        out.push_str(&text[cursor..m.start()]);
        out.push_str(&render(&caps));
        cursor = m.end();
    }
    out.push_str(&text[cursor..]);
    out
}

fn words_once(text: &str, notes: &mut Vec<SigRule>) -> String {
    let mut fired = false;
    let step = replace_unless_hyphenated(&AND_A_HALF, text, |c| {
        fired = true;
        format_decimal(word_value(&c[1]).unwrap_or(0.0) + 0.5)
    });
    let step = replace_unless_hyphenated(&HALF_UNIT, &step, |c| {
        fired = true;
        format!("0.5 {}", &c[1])
    });
    let step = replace_unless_hyphenated(&NUMBER_WORD, &step, |c| {
        fired = true;
        format_decimal(word_value(&c[1]).unwrap_or(0.0))
    });
    if fired {
        note(notes, SigRule::NumberWord);
    }
    step
}

fn words_noted(text: &str, notes: &mut Vec<SigRule>) -> String {
    let mut current = text.to_string();
    loop {
        let next = words_once(&current, notes);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Replaces the number words one..twenty by numerals, `N and a half` by
/// `N.5`, and `half` before a dose unit by `0.5`.
pub fn words_to_numerals(text: &str) -> String {
    words_noted(text, &mut Vec::new())
}

fn normalize_noted(text: &str, notes: &mut Vec<SigRule>) -> String {
    let t = fractions_noted(text, notes);
    words_noted(&t, notes)
}

// ---------------------------------------------------------------------------
// frequency

const NUM: &str = r"(\d+(?:\.\d+)?)";

static EVERY_N_HOURS: LazyLock<Regex> = LazyLock::new(|| {
    re(&format!(
        r"(?i)\b(?:every|q)\s*{NUM}\s*(?:-\s*\d+(?:\.\d+)?\s*)?(?:hours?|hrs?|h)\b"
    ))
});
static N_TIMES_A_DAY: LazyLock<Regex> = LazyLock::new(|| {
    re(&format!(
        r"(?i)\b{NUM}\s*(?:x|times)\s*(?:(?:a|per|each|every)\s+day|/\s*day|daily)\b"
    ))
});
static QID: LazyLock<Regex> = LazyLock::new(|| re(r"(?i)\bqid\b"));
static TID: LazyLock<Regex> = LazyLock::new(|| re(r"(?i)\b(?:tid|thrice\s+(?:(?:a|per|each|every)\s+day|daily))\b"));
static BID: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?i)\b(?:bid|twice\s+(?:(?:a|per|each|every)\s+day|daily))\b"));
static TIMES_A_WEEK: LazyLock<Regex> = LazyLock::new(|| {
    re(&format!(
        r"(?i)\b(once|twice|{NUM}\s*(?:x|times))\s+(?:a|per|each)\s+week\b"
    ))
});
static EVERY_N_UNITS: LazyLock<Regex> =
    LazyLock::new(|| re(&format!(r"(?i)\bevery\s+{NUM}\s*(days?|weeks?|months?)\b")));
static WEEKLY: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:weekly|once\s+(?:a|per|every)\s+week|every\s+week|q\s?week|qwk)\b")
});
static MONTHLY: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:monthly|once\s+(?:a|per|every)\s+month|every\s+month|q\s?month)\b")
});
static DAILY: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:qd|qday|daily|nightly|qhs|qam|qpm|once\s+(?:(?:a|per|each)\s+day|daily)|every\s+(?:day|morning|evening|night)|(?:a|per|each)\s+day|at\s+bedtime)\b")
});
static PRN: LazyLock<Regex> = LazyLock::new(|| re(r"(?i)\b(?:prn|as\s+needed)\b"));

fn positive(v: f64) -> Option<f64> {
    (v.is_finite() && v > 0.0).then_some(v)
}

fn capture_num(c: &Captures, i: usize) -> Option<f64> {
    c.get(i).and_then(|m| m.as_str().parse::<f64>().ok())
}

/// Administrations per day, on numeral-normalized text.
pub fn parse_frequency(text: &str) -> Option<f64> {
    if let Some(c) = EVERY_N_HOURS.captures(text) {
        return capture_num(&c, 1).and_then(positive).map(|h| 24.0 / h);
    }
    if let Some(c) = N_TIMES_A_DAY.captures(text) {
        return capture_num(&c, 1).and_then(positive);
    }
    if QID.is_match(text) {
        return Some(4.0);
    }
    if TID.is_match(text) {
        return Some(3.0);
    }
    if BID.is_match(text) {
        return Some(2.0);
    }
    if let Some(c) = TIMES_A_WEEK.captures(text) {
        let per_week = match c[1].to_ascii_lowercase().as_str() {
            "once" => Some(1.0),
            "twice" => Some(2.0),
            _ => capture_num(&c, 2).and_then(positive),
        };
        return per_week.map(|n| n / 7.0);
    }
    if let Some(days) = every_n_units_days(text) {
        return Some(1.0 / days);
    }
    if WEEKLY.is_match(text) {
        return Some(1.0 / 7.0);
    }
    if MONTHLY.is_match(text) {
        return Some(1.0 / 30.0);
    }
    if DAILY.is_match(text) {
        return Some(1.0);
    }
    None
}

/// `every N days|weeks|months` as a day count (weeks = 7, months = 30).
fn every_n_units_days(text: &str) -> Option<f64> {
    let c = EVERY_N_UNITS.captures(text)?;
    let n = capture_num(&c, 1).and_then(positive)?;
    let unit = c[2].to_ascii_lowercase();
    let days = if unit.starts_with("day") {
        n
    } else if unit.starts_with("week") {
        n * 7.0
    } else {
        n * 30.0
    };
    Some(days)
}

// ---------------------------------------------------------------------------
// duration

static FOR_N_DAYS: LazyLock<Regex> =
    LazyLock::new(|| re(&format!(r"(?i)\bfor\s+(?:up\s+to\s+)?{NUM}\s*days?\b")));
static X_DAYS: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?i)\bx(\d+)\b|\bx\s+(\d+)\s*days?\b"));

fn duration_noted(text: &str, notes: &mut Vec<SigRule>) -> Option<f64> {
    if let Some(n) = FOR_N_DAYS
        .captures(text)
        .and_then(|c| capture_num(&c, 1))
        .and_then(positive)
    {
        note(notes, SigRule::DurationExplicit);
        return Some(n);
    }
    for c in X_DAYS.captures_iter(text) {
        let digits = c.get(1).or_else(|| c.get(2)).unwrap().as_str();
        match digits.parse::<u64>() {
            Ok(n) if (1..=MAX_X_DURATION_DAYS).contains(&n) => {
                note(notes, SigRule::DurationXDays);
                return Some(n as f64);
            }
            Ok(0) => {}
            _ => note(notes, SigRule::DurationXSuppressed),
        }
    }
    if let Some(days) = every_n_units_days(text).filter(|&d| d >= 2.0) {
        note(notes, SigRule::DurationInterval);
        return Some(days);
    }
    if WEEKLY.is_match(text) {
        note(notes, SigRule::DurationWeekly);
        return Some(7.0);
    }
    if MONTHLY.is_match(text) {
        note(notes, SigRule::DurationMonthly);
        return Some(30.0);
    }
    None
}

/// Days of supply stated by the SIG, on numeral-normalized text.
pub fn parse_duration(text: &str) -> Option<f64> {
    duration_noted(text, &mut Vec::new())
}

// ---------------------------------------------------------------------------
// daily quantity

static DOSE_AMOUNT: LazyLock<Regex> =
    LazyLock::new(|| re(&format!(r"(?i)\b{NUM}\s*({UNIT_ALTERNATION})\b")));
static TIME_OF_DAY: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:morning|am|a\.m\.|noon|afternoon|evening|pm|p\.m\.|night|bedtime|hs)\b")
});
static CLAUSE_BREAK: LazyLock<Regex> =
    LazyLock::new(|| re(r"(?i)[,;()]|\band\b|\bthen\b|\bplus\b"));
static TAPER: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:then|taper(?:ing)?|after|followed\s+by|week\s*\d+|day\s*\d+|days?\s+\d+\s*-\s*\d+)\b")
});

fn canonical_unit(word: &str) -> &'static str {
    let w = word.to_ascii_lowercase();
    match w.as_str() {
        "tab" | "tabs" | "tablet" | "tablets" => "tablet",
        "film" | "films" => "film",
        "strip" | "strips" => "strip",
        "capsule" | "capsules" => "capsule",
        "each" => "each",
        "ml" => "ml",
        _ => "patch",
    }
}

struct DoseAmount {
    amount: f64,
    unit: &'static str,
    time_of_day: bool,
}

fn dose_amounts(text: &str) -> Vec<DoseAmount> {
    let matches: Vec<_> = DOSE_AMOUNT.captures_iter(text).collect();
    matches
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let amount = capture_num(c, 1)?;
            let after = c.get(0).unwrap().end();
            let next = matches
                .get(i + 1)
                .map_or(text.len(), |n| n.get(0).unwrap().start());
            let tail = &text[after..next];
            let clause = CLAUSE_BREAK.find(tail).map_or(tail, |m| &tail[..m.start()]);
            Some(DoseAmount {
                amount,
                unit: canonical_unit(&c[2]),
                time_of_day: TIME_OF_DAY.is_match(clause),
            })
        })
        .collect()
}

fn daily_noted(
    text: &str,
    frequency: Option<f64>,
    notes: &mut Vec<SigRule>,
) -> (Option<f64>, Option<&'static str>) {
    let amounts = dose_amounts(text);
    let Some(first) = amounts.first() else {
        return (None, None);
    };
    let timed: Vec<_> = amounts.iter().filter(|a| a.time_of_day).collect();
    if timed.len() >= 2 {
        note(notes, SigRule::DoseSum);
        return (Some(timed.iter().map(|a| a.amount).sum()), Some(timed[0].unit));
    }
    let distinct = amounts.iter().any(|a| a.amount != first.amount);
    if amounts.len() >= 2 && distinct && TAPER.is_match(text) {
        note(notes, SigRule::TaperUnsupported);
        return (None, None);
    }
    match frequency {
        Some(f) if f >= 1.0 => {
            note(notes, SigRule::DoseTimesFrequency);
            (Some(first.amount * f), Some(first.unit))
        }
        Some(_) => {
            note(notes, SigRule::DosePerAdministration);
            (Some(first.amount), Some(first.unit))
        }
        None if first.time_of_day => {
            note(notes, SigRule::DoseTimeOfDay);
            (Some(first.amount), Some(first.unit))
        }
        None => (None, None),
    }
}

/// Units taken per day. Lists of time-of-day doses are summed; a single
/// amount is multiplied by a daily-or-faster frequency, and kept as the
/// per-administration amount for slower schedules.
pub fn parse_daily_quantity(text: &str) -> Option<f64> {
    let mut notes = Vec::new();
    let norm = normalize_noted(text, &mut notes);
    let freq = parse_frequency(&norm);
    daily_noted(&norm, freq, &mut notes).0
}

// ---------------------------------------------------------------------------
// injectables

static INJECTABLE_CUE: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:inject(?:ion|ions|ed|able)?|intramuscular(?:ly)?|subcutaneous(?:ly)?|patch(?:es)?)\b")
});
/// Long-acting products given on a monthly schedule when the SIG is silent.
static MONTHLY_LEXICON: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:vivitrol|sublocade|naltrexone\b.*\b(?:extended[- ]?rel(?:ease)?|er|xr))\b")
});

fn schedule_interval(text: &str) -> Option<f64> {
    every_n_units_days(text)
        .filter(|&d| d >= 7.0)
        .or_else(|| WEEKLY.is_match(text).then_some(7.0))
        .or_else(|| MONTHLY.is_match(text).then_some(30.0))
}

fn injectable_noted(
    text: &str,
    drug_name: Option<&str>,
    notes: &mut Vec<SigRule>,
) -> (bool, Option<f64>) {
    let cue = INJECTABLE_CUE.is_match(text);
    let lexicon = drug_name.is_some_and(|d| MONTHLY_LEXICON.is_match(d));
    if cue {
        note(notes, SigRule::InjectableCue);
    }
    if lexicon {
        note(notes, SigRule::InjectableLexicon);
    }
    let mut interval = schedule_interval(text);
    if interval.is_some() {
        note(notes, SigRule::ScheduleInterval);
    } else if lexicon {
        note(notes, SigRule::IntervalDefault);
        interval = Some(30.0);
    }
    (cue || lexicon, interval)
}

/// Injectable detection and administration interval in days.
pub fn detect_injectable(text: &str, drug_name: Option<&str>) -> (bool, Option<f64>) {
    let mut notes = Vec::new();
    let norm = normalize_noted(text, &mut notes);
    injectable_noted(&norm, drug_name, &mut notes)
}

// ---------------------------------------------------------------------------

/// Full interpretation of a SIG.
pub fn parse_sig(text: &str, drug_name: Option<&str>) -> SigParse {
    let mut notes = Vec::new();
    let norm = normalize_noted(text, &mut notes);
    let frequency = parse_frequency(&norm);
    if frequency.is_some() {
        note(&mut notes, SigRule::Frequency);
        if PRN.is_match(&norm) {
            note(&mut notes, SigRule::PrnMaxRate);
        }
    }
    let duration = duration_noted(&norm, &mut notes);
    let (daily, unit) = daily_noted(&norm, frequency, &mut notes);
    let (is_injectable, interval) = injectable_noted(&norm, drug_name, &mut notes);
    SigParse {
        daily_quantity: daily,
        frequency_per_day: frequency,
        duration_days: duration,
        is_injectable,
        schedule_interval_days: interval,
        dose_unit: unit.map(str::to_string),
        notes,
    }
}
