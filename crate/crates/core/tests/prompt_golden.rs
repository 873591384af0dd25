use std::collections::BTreeSet;

use rxunify::extraction::{build_prompt, IMPORTANT_NOTES};
use rxunify::schema::{FormatRegistry, RawRecord};

const NOTES: &str = include_str!("data/important_notes.txt");

#[test]
fn notes_constant_matches_golden_file() {
    assert_eq!(IMPORTANT_NOTES, NOTES.trim_end());
    assert_eq!(NOTES.lines().count(), 10);
}

#[test]
fn every_clinic_prompt_embeds_the_notes() {
    for spec in FormatRegistry::builtin().specs() {
        let columns: BTreeSet<&str> = spec.field_map.iter().map(|f| f.source.as_str()).collect();
        let record = RawRecord::new(
            spec.clinic.clone(),
            columns.into_iter().map(|c| (c.to_string(), "1".to_string())).collect(),
        )
        .unwrap();
        let prompt = build_prompt(&record, spec).unwrap().render();
        assert!(prompt.contains(NOTES.trim_end()), "{}", spec.clinic);
    }
}
