use unicode_normalization::UnicodeNormalization;

/// Trims, collapses internal whitespace runs to one space and applies
/// Unicode NFC. Case is preserved.
pub fn normalize_text(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.nfc().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn collapses_whitespace() {
        assert_eq!(normalize_text("  TOTAL   ITEMS "), "TOTAL ITEMS");
        assert_eq!(normalize_text("28.000"), "28.000");
        assert_eq!(normalize_text("JASMINE\tMT  (L)"), "JASMINE MT (L)");
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn composes_to_nfc() {
        assert_eq!(normalize_text("Cafe\u{301}"), "Caf\u{e9}");
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
