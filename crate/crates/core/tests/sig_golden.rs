mod common {
    pub mod golden;
}

use common::golden::{cases, check, group_sizes};

#[test]
fn every_golden_case_passes() {
    let failures: Vec<String> = cases()
        .iter()
        .filter_map(|c| {
            let errs = check(c);
            (!errs.is_empty()).then(|| format!("line {} `{}`: {}", c.line, c.text, errs.join("; ")))
        })
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn every_group_has_three_cases() {
    for (group, n) in group_sizes() {
        assert!(n >= 3, "{group} has {n} cases");
    }
}

#[test]
fn verbatim_examples_are_present() {
    let texts: Vec<String> = cases().into_iter().map(|c| c.text).collect();
    for needle in ["3 1/2", "one tab in morning, half tab at night", "X10", "weekly", "monthly"] {
        assert!(texts.iter().any(|t| t.contains(needle)), "{needle}");
    }
}
