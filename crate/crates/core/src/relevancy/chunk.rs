//! Rule-based noun-phrase chunking for short image captions.
//!
//! Captions from image captioners are short declaratives ("a burger with
//! lettuce on a plate"), so phrases are maximal runs of tokens between
//! prepositions, conjunctions, auxiliaries and participles that introduce a
//! new constituent.

/// Splits text into noun phrases.
pub trait Chunker: Send + Sync {
    fn noun_phrases(&self, text: &str) -> Vec<String>;
}

const BREAKERS: &[&str] = &[
    "with", "on", "in", "over", "under", "at", "of", "from", "to", "into", "onto", "by", "for", "near", "beside",
    "behind", "above", "below", "across", "through", "around", "against", "between", "inside", "outside", "next",
    "atop", "upon", "and", "or", "but", "is", "are", "was", "were", "be", "been", "being", "has", "have", "had",
    "that", "which", "who", "while", "there", "it", "they", "he", "she", "up", "down", "out", "off",
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "these", "those", "some", "many", "several", "two", "three", "four", "its", "his",
    "her", "their", "my", "our", "your", "no", "each", "every",
];

#[derive(Clone, Copy, Debug, Default)]
pub struct RuleChunker;

fn is_breaker(word: &str) -> bool {
    BREAKERS.contains(&word)
}

fn is_determiner(word: &str) -> bool {
    DETERMINERS.contains(&word)
}

impl Chunker for RuleChunker {
    fn noun_phrases(&self, text: &str) -> Vec<String> {
        // (original token, lower-case token, clause boundary after it)
        let mut tokens: Vec<(String, String, bool)> = Vec::new();
        for raw in text.split_whitespace() {
            let boundary = raw.ends_with([',', '.', ';', ':', '!', '?']);
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-');
            if word.is_empty() {
                if let Some(last) = tokens.last_mut() {
                    last.2 |= boundary;
                }
                continue;
            }
            tokens.push((word.to_owned(), word.to_lowercase(), boundary));
        }

        let mut phrases = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        let flush = |current: &mut Vec<&str>, phrases: &mut Vec<String>| {
            let has_content = current.iter().any(|w| !is_determiner(&w.to_lowercase()));
            if has_content {
                phrases.push(current.join(" "));
            }
            current.clear();
        };

        for i in 0..tokens.len() {
            let (word, lower, boundary) = (&tokens[i].0, tokens[i].1.as_str(), tokens[i].2);
            let next = tokens.get(i + 1).map(|t| t.1.as_str());
            let prev = i.checked_sub(1).map(|j| tokens[j].1.as_str());
            let verbal = lower.len() > 4 && (lower.ends_with("ing") || lower.ends_with("ed"));
            let opens_constituent = next.is_none_or(|n| is_breaker(n) || is_determiner(n))
                || prev.is_some_and(|p| matches!(p, "is" | "are" | "was" | "were" | "being"))
                || boundary;
            if is_breaker(lower) || (verbal && opens_constituent && !current.is_empty()) {
                flush(&mut current, &mut phrases);
                continue;
            }
            current.push(word);
            if boundary {
                flush(&mut current, &mut phrases);
            }
        }
        flush(&mut current, &mut phrases);
        phrases
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn np(text: &str) -> Vec<String> {
        RuleChunker.noun_phrases(text)
    }

    #[test]
    fn caption_phrases() {
        assert_eq!(np("a room with a small apple"), vec!["a room", "a small apple"]);
        assert_eq!(np("rotten apple and old car"), vec!["rotten apple", "old car"]);
        assert_eq!(np("a sunset over the sea"), vec!["a sunset", "the sea"]);
        assert_eq!(np("a burger with lettuce on a plate"), vec!["a burger", "lettuce", "a plate"]);
        assert_eq!(np("a man eating a burger"), vec!["a man", "a burger"]);
        assert_eq!(np("a table filled with food"), vec!["a table", "food"]);
        assert_eq!(np("a burger sitting on a plate"), vec!["a burger", "a plate"]);
        assert_eq!(np("a living room with a couch"), vec!["a living room", "a couch"]);
        assert_eq!(np("a bowl of rice, and a cup"), vec!["a bowl", "rice", "a cup"]);
        assert!(np("").is_empty());
        assert!(np("with the and").is_empty());
    }
}
