//! Word -> lexical-category lookup.
//!
//! Loads either a WordNet `dict/` directory (`lexnames` plus `data.*` and
//! optional `*.exc` files) or a two-column TSV of `lemma<TAB>lexname,...`.
//! A small TSV covering common caption words is bundled.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{AppealError, Result};

const BUILTIN: &str = include_str!("../../data/lexicon.tsv");

const NOUN_SUFFIXES: [(&str, &str); 8] = [
    ("s", ""),
    ("ses", "s"),
    ("xes", "x"),
    ("zes", "z"),
    ("ches", "ch"),
    ("shes", "sh"),
    ("men", "man"),
    ("ies", "y"),
];

#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    /// Lower-case lemma (multiword joined by `_`) -> lexnames over all senses.
    entries: HashMap<String, BTreeSet<String>>,
    /// Irregular inflection -> base forms.
    exceptions: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::from_tsv(BUILTIN).expect("bundled lexicon parses")
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (lemma, names) = line.split_once('\t').ok_or_else(|| AppealError::Format {
                path: "<lexicon>".into(),
                message: format!("line {}: expected `lemma<TAB>lexnames`", i + 1),
            })?;
            for name in names.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                lex.add(lemma, name);
            }
        }
        Ok(lex)
    }

    /// A directory is read as a WordNet dict; a file as TSV.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::from_wordnet_dir(path)
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| AppealError::io(path, e))?;
            Self::from_tsv(&text)
        }
    }

    pub fn from_wordnet_dir(dir: &Path) -> Result<Self> {
        let lexnames_path = dir.join("lexnames");
        let text = std::fs::read_to_string(&lexnames_path).map_err(|e| AppealError::io(&lexnames_path, e))?;
        let mut names = HashMap::new();
        for line in text.lines() {
            let mut cols = line.split_whitespace();
            if let (Some(num), Some(name)) = (cols.next(), cols.next()) {
                if let Ok(num) = num.parse::<u32>() {
                    names.insert(num, name.to_owned());
                }
            }
        }

        let mut lex = Self::default();
        let mut found = false;
        for pos in ["noun", "verb", "adj", "adv"] {
            let path = dir.join(format!("data.{pos}"));
            let Ok(text) = std::fs::read_to_string(&path) else { continue };
            found = true;
            for line in text.lines() {
                // License header lines start with two spaces.
                if line.starts_with("  ") {
                    continue;
                }
                let cols: Vec<&str> = line.split(' ').collect();
                if cols.len() < 5 {
                    continue;
                }
                let (Ok(filenum), Ok(count)) = (cols[1].parse::<u32>(), u32::from_str_radix(cols[3], 16)) else {
                    continue;
                };
                let Some(lexname) = names.get(&filenum) else { continue };
                for w in 0..count as usize {
                    if let Some(word) = cols.get(4 + 2 * w) {
                        // Adjective markers like `(a)` are glued to the lemma.
                        let word = word.split('(').next().unwrap_or(word);
                        lex.add(word, lexname);
                    }
                }
            }
            let exc = dir.join(format!("{pos}.exc"));
            if let Ok(text) = std::fs::read_to_string(&exc) {
                for line in text.lines() {
                    let mut cols = line.split_whitespace();
                    if let Some(inflected) = cols.next() {
                        lex.exceptions
                            .entry(inflected.to_lowercase())
                            .or_default()
                            .extend(cols.map(str::to_lowercase));
                    }
                }
            }
        }
        if !found {
            return Err(AppealError::validation(
                "lexicon",
                format!("{} has no WordNet data.* files", dir.display()),
            ));
        }
        Ok(lex)
    }

    pub fn add(&mut self, lemma: &str, lexname: &str) {
        self.entries
            .entry(normalise(lemma))
            .or_default()
            .insert(lexname.to_owned());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, lemma: &str) -> bool {
        !self.base_forms(&normalise(lemma)).is_empty()
    }

    /// Lexnames over every sense of every base form of `word`.
    pub fn lexnames(&self, word: &str) -> BTreeSet<&str> {
        self.base_forms(&normalise(word))
            .into_iter()
            .flat_map(|lemma| self.entries[&lemma].iter().map(String::as_str))
            .collect()
    }

    /// Known lemmas that `form` may inflect from, itself included.
    fn base_forms(&self, form: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.entries.contains_key(form) {
            out.push(form.to_owned());
        }
        if let Some(bases) = self.exceptions.get(form) {
            out.extend(bases.iter().filter(|b| self.entries.contains_key(*b)).cloned());
        }
        for (suffix, replacement) in NOUN_SUFFIXES {
            if let Some(stem) = form.strip_suffix(suffix) {
                if stem.is_empty() || form.ends_with("ss") {
                    continue;
                }
                let candidate = format!("{stem}{replacement}");
                if self.entries.contains_key(&candidate) && !out.contains(&candidate) {
                    out.push(candidate);
                }
            }
        }
        out
    }
}

fn normalise(word: &str) -> String {
    word.trim().to_lowercase().replace([' ', '-'], "_")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_lookups() {
        let lex = Lexicon::builtin();
        assert!(lex.lexnames("apple").contains("noun.food"));
        assert!(!lex.lexnames("car").contains("noun.food"));
        assert!(lex.lexnames("Apples").contains("noun.food"));
        assert!(lex.lexnames("cookies").contains("noun.food"));
        assert!(lex.lexnames("living room").contains("noun.artifact"));
        assert!(lex.lexnames("zzz").is_empty());
    }

    #[test]
    fn wordnet_dict_format() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("lexnames"), "03\tnoun.Tops\t1\n06\tnoun.artifact\t1\n13\tnoun.food\t1\n").unwrap();
        std::fs::write(
            dir.path().join("data.noun"),
            "  1 This software and database is being provided\n\
             07739125 13 n 01 apple 0 003 @ 07705931 n 0000 | fruit with red or yellow or green skin\n\
             02958343 06 n 05 car 0 auto 0 automobile 0 machine 0 motorcar 0 001 @ 03791235 n 0000 | a motor vehicle\n\
             04069276 06 n 01 living_room 0 000 | a room in a private house\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("noun.exc"), "mice mouse\nautomata automaton\n").unwrap();
        let lex = Lexicon::load(dir.path()).unwrap();
        assert_eq!(lex.lexnames("apple").into_iter().collect::<Vec<_>>(), vec!["noun.food"]);
        assert!(lex.lexnames("motorcar").contains("noun.artifact"));
        assert!(lex.lexnames("living room").contains("noun.artifact"));
        assert!(lex.lexnames("cars").contains("noun.artifact"));
    }

    #[test]
    fn tsv_errors_are_reported() {
        assert!(Lexicon::from_tsv("apple noun.food\n").is_err());
    }
}
