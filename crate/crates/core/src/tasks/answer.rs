const OPEN: &str = "<answer>";
const CLOSE: &str = "</answer>";

/// Trimmed content of the first `<answer>...</answer>` pair, if one closes.
///
/// Anything after the first closing tag is ignored.
pub fn extract_answer(text: &str) -> Option<String> {
    let start = text.find(OPEN)? + OPEN.len();
    let len = text[start..].find(CLOSE)?;
    Some(text[start..start + len].trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let text = "<reasoning>\nfill the grid\n</reasoning>\n\n<answer>\n3214413214232341\n</answer>";
        assert_eq!(extract_answer(text).as_deref(), Some("3214413214232341"));
    }

    #[test]
    fn malformed_and_multiple() {
        assert_eq!(extract_answer("<answer> 12"), None);
        assert_eq!(extract_answer("no tags"), None);
        assert_eq!(extract_answer("</answer><answer>x"), None);
        assert_eq!(
            extract_answer("<answer>1</answer> junk <answer>2</answer>").as_deref(),
            Some("1")
        );
        assert_eq!(extract_answer("<answer></answer>").as_deref(), Some(""));
    }
}
