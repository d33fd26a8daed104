mod common;

use antkit::metrics::{damerau_levenshtein, damerau_levenshtein_full, levenshtein};
use proptest::prelude::*;

fn word(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=max_len)
}

proptest! {
    #[test]
    fn osa_matches_cursor_search(a in word(8), b in word(8)) {
        prop_assert_eq!(damerau_levenshtein(&a, &b), common::osa_by_search(&a, &b));
    }

    #[test]
    fn full_matches_string_search(a in word(4), b in word(4)) {
        prop_assert_eq!(damerau_levenshtein_full(&a, &b), common::dl_by_search(&a, &b));
    }

    #[test]
    fn variants_are_ordered(a in word(8), b in word(8)) {
        let full = damerau_levenshtein_full(&a, &b);
        let osa = damerau_levenshtein(&a, &b);
        prop_assert!(full <= osa && osa <= levenshtein(&a, &b));
    }
}
