//! The Porter (1980) suffix-stripping stemmer.
//!
//! Input is expected in lowercase; bytes outside `a..z` count as consonants
//! so digits and non-ASCII letters pass through untouched.

/// Which rule set to apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PorterVariant {
    /// The rules exactly as published in 1980.
    #[default]
    Original,
    /// The author's reference release, which produced the published
    /// vocabulary/output vectors: words of one or two characters are left
    /// alone, `bli -> ble` replaces `abli -> able`, and `logi -> log` is
    /// added.
    Reference,
}

/// Stems a single lowercase word with the original rules.
pub fn stem(word: &str) -> String {
    stem_with(word, PorterVariant::Original)
}

pub fn stem_with(word: &str, variant: PorterVariant) -> String {
    if variant == PorterVariant::Reference && word.len() <= 2 {
        return word.to_owned();
    }
    let mut w = Word::new(word);
    w.step1a();
    w.step1b();
    w.step1c();
    w.step2(variant);
    w.step3();
    w.step4();
    w.step5a();
    w.step5b();
    w.into_string()
}

struct Word {
    b: Vec<u8>,
}

impl Word {
    fn new(s: &str) -> Self {
        Word {
            b: s.as_bytes().to_vec(),
        }
    }

    fn into_string(self) -> String {
        // Only ASCII suffixes are ever removed or appended.
        String::from_utf8(self.b).expect("stemmer keeps utf-8 boundaries")
    }

    fn is_consonant(b: &[u8], i: usize) -> bool {
        match b[i] {
            b'a' | b'e' | b'i' | b'o' | b'u' => false,
            b'y' => i == 0 || !Self::is_consonant(b, i - 1),
            _ => true,
        }
    }

    /// Number of VC sequences in `b[..len]`.
    fn measure(b: &[u8], len: usize) -> usize {
        let mut i = 0;
        while i < len && Self::is_consonant(b, i) {
            i += 1;
        }
        let mut m = 0;
        loop {
            while i < len && !Self::is_consonant(b, i) {
                i += 1;
            }
            if i >= len {
                return m;
            }
            while i < len && Self::is_consonant(b, i) {
                i += 1;
            }
            m += 1;
        }
    }

    fn has_vowel(b: &[u8], len: usize) -> bool {
        (0..len).any(|i| !Self::is_consonant(b, i))
    }

    fn ends_double_consonant(b: &[u8], len: usize) -> bool {
        len >= 2 && b[len - 1] == b[len - 2] && Self::is_consonant(b, len - 1)
    }

    /// `*o`: stem ends consonant-vowel-consonant, last consonant not w, x or y.
    fn ends_cvc(b: &[u8], len: usize) -> bool {
        len >= 3
            && Self::is_consonant(b, len - 3)
            && !Self::is_consonant(b, len - 2)
            && Self::is_consonant(b, len - 1)
            && !matches!(b[len - 1], b'w' | b'x' | b'y')
    }

    fn ends_with(&self, suffix: &str) -> bool {
        self.b.ends_with(suffix.as_bytes())
    }

    fn stem_len(&self, suffix: &str) -> usize {
        self.b.len() - suffix.len()
    }

    fn replace(&mut self, suffix: &str, with: &str) {
        let n = self.stem_len(suffix);
        self.b.truncate(n);
        self.b.extend_from_slice(with.as_bytes());
    }

    fn m_of(&self, suffix: &str) -> usize {
        Self::measure(&self.b, self.stem_len(suffix))
    }

    /// Applies the longest matching rule whose stem has measure above `min_m`.
    /// Only the longest matching suffix is considered, as in the original rules.
    fn apply_table(&mut self, rules: &[(&str, &str)], min_m: usize) {
        let best = rules
            .iter()
            .filter(|(s, _)| self.ends_with(s))
            .max_by_key(|(s, _)| s.len());
        if let Some(&(suffix, repl)) = best {
            if self.m_of(suffix) > min_m {
                self.replace(suffix, repl);
            }
        }
    }

    fn step1a(&mut self) {
        if self.ends_with("sses") {
            self.replace("sses", "ss");
        } else if self.ends_with("ies") {
            self.replace("ies", "i");
        } else if self.ends_with("ss") {
        } else if self.ends_with("s") {
            self.replace("s", "");
        }
    }

    fn step1b(&mut self) {
        let stripped = if self.ends_with("eed") {
            if self.m_of("eed") > 0 {
                self.replace("eed", "ee");
            }
            false
        } else if self.ends_with("ed") && Self::has_vowel(&self.b, self.stem_len("ed")) {
            self.replace("ed", "");
            true
        } else if self.ends_with("ing") && Self::has_vowel(&self.b, self.stem_len("ing")) {
            self.replace("ing", "");
            true
        } else {
            false
        };
        if !stripped {
            return;
        }
        let len = self.b.len();
        if self.ends_with("at") {
            self.replace("at", "ate");
        } else if self.ends_with("bl") {
            self.replace("bl", "ble");
        } else if self.ends_with("iz") {
            self.replace("iz", "ize");
        } else if Self::ends_double_consonant(&self.b, len)
            && !matches!(self.b[len - 1], b'l' | b's' | b'z')
        {
            self.b.pop();
        } else if Self::measure(&self.b, len) == 1 && Self::ends_cvc(&self.b, len) {
            self.b.push(b'e');
        }
    }

    fn step1c(&mut self) {
        if self.ends_with("y") && Self::has_vowel(&self.b, self.stem_len("y")) {
            self.replace("y", "i");
        }
    }

    fn step2(&mut self, variant: PorterVariant) {
        const REFERENCE_EXTRA: &[(&str, &str)] = &[("bli", "ble"), ("logi", "log")];
        const RULES: &[(&str, &str)] = &[
            ("ational", "ate"),
            ("tional", "tion"),
            ("enci", "ence"),
            ("anci", "ance"),
            ("izer", "ize"),
            ("abli", "able"),
            ("alli", "al"),
            ("entli", "ent"),
            ("eli", "e"),
            ("ousli", "ous"),
            ("ization", "ize"),
            ("ation", "ate"),
            ("ator", "ate"),
            ("alism", "al"),
            ("iveness", "ive"),
            ("fulness", "ful"),
            ("ousness", "ous"),
            ("aliti", "al"),
            ("iviti", "ive"),
            ("biliti", "ble"),
        ];
        match variant {
            PorterVariant::Original => self.apply_table(RULES, 0),
            PorterVariant::Reference => {
                let rules: Vec<(&str, &str)> = RULES
                    .iter()
                    .filter(|(s, _)| *s != "abli")
                    .chain(REFERENCE_EXTRA)
                    .copied()
                    .collect();
                self.apply_table(&rules, 0);
            }
        }
    }

    fn step3(&mut self) {
        const RULES: &[(&str, &str)] = &[
            ("icate", "ic"),
            ("ative", ""),
            ("alize", "al"),
            ("iciti", "ic"),
            ("ical", "ic"),
            ("ful", ""),
            ("ness", ""),
        ];
        self.apply_table(RULES, 0);
    }

    fn step4(&mut self) {
        const SUFFIXES: &[&str] = &[
            "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment", "ent",
            "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
        ];
        let Some(&suffix) = SUFFIXES
            .iter()
            .filter(|s| self.ends_with(s))
            .max_by_key(|s| s.len())
        else {
            return;
        };
        let stem = self.stem_len(suffix);
        if Self::measure(&self.b, stem) <= 1 {
            return;
        }
        if suffix == "ion" && !(stem > 0 && matches!(self.b[stem - 1], b's' | b't')) {
            return;
        }
        self.b.truncate(stem);
    }

    fn step5a(&mut self) {
        if !self.ends_with("e") {
            return;
        }
        let stem = self.stem_len("e");
        let m = Self::measure(&self.b, stem);
        if m > 1 || (m == 1 && !Self::ends_cvc(&self.b, stem)) {
            self.b.truncate(stem);
        }
    }

    fn step5b(&mut self) {
        let len = self.b.len();
        if Self::measure(&self.b, len) > 1
            && Self::ends_double_consonant(&self.b, len)
            && self.b[len - 1] == b'l'
        {
            self.b.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(word: &str, step: fn(&mut Word)) -> String {
        let mut w = Word::new(word);
        step(&mut w);
        w.into_string()
    }

    fn check_step(step: fn(&mut Word), cases: &[(&str, &str)]) {
        for (input, expected) in cases {
            assert_eq!(&run(input, step), expected, "input {input}");
        }
    }

    // Worked examples printed alongside each rule of the 1980 algorithm.
    #[test]
    fn step1a_vectors() {
        check_step(
            Word::step1a,
            &[
                ("caresses", "caress"),
                ("ponies", "poni"),
                ("ties", "ti"),
                ("caress", "caress"),
                ("cats", "cat"),
            ],
        );
    }

    #[test]
    fn step1b_vectors() {
        check_step(
            Word::step1b,
            &[
                ("feed", "feed"),
                ("agreed", "agree"),
                ("plastered", "plaster"),
                ("bled", "bled"),
                ("motoring", "motor"),
                ("sing", "sing"),
                ("conflated", "conflate"),
                ("troubled", "trouble"),
                ("sized", "size"),
                ("hopping", "hop"),
                ("tanned", "tan"),
                ("falling", "fall"),
                ("hissing", "hiss"),
                ("fizzed", "fizz"),
                ("failing", "fail"),
                ("filing", "file"),
            ],
        );
    }

    #[test]
    fn step1c_vectors() {
        check_step(Word::step1c, &[("happy", "happi"), ("sky", "sky")]);
    }

    #[test]
    fn step2_vectors() {
        check_step(
            |w| w.step2(PorterVariant::Original),
            &[
                ("relational", "relate"),
                ("conditional", "condition"),
                ("rational", "rational"),
                ("valenci", "valence"),
                ("hesitanci", "hesitance"),
                ("digitizer", "digitize"),
                ("conformabli", "conformable"),
                ("radicalli", "radical"),
                ("differentli", "different"),
                ("vileli", "vile"),
                ("analogousli", "analogous"),
                ("vietnamization", "vietnamize"),
                ("predication", "predicate"),
                ("operator", "operate"),
                ("feudalism", "feudal"),
                ("decisiveness", "decisive"),
                ("hopefulness", "hopeful"),
                ("callousness", "callous"),
                ("formaliti", "formal"),
                ("sensitiviti", "sensitive"),
                ("sensibiliti", "sensible"),
            ],
        );
    }

    #[test]
    fn reference_variant_departures() {
        use PorterVariant::*;
        assert_eq!(stem_with("as", Original), "a");
        assert_eq!(stem_with("as", Reference), "as");
        check_step(|w| w.step2(Original), &[("possibli", "possibli"), ("analogi", "analogi")]);
        check_step(|w| w.step2(Reference), &[("possibli", "possible"), ("analogi", "analog"), ("conformabli", "conformable")]);
    }

    #[test]
    fn step3_vectors() {
        check_step(
            Word::step3,
            &[
                ("triplicate", "triplic"),
                ("formative", "form"),
                ("formalize", "formal"),
                ("electriciti", "electric"),
                ("electrical", "electric"),
                ("hopeful", "hope"),
                ("goodness", "good"),
            ],
        );
    }

    #[test]
    fn step4_vectors() {
        check_step(
            Word::step4,
            &[
                ("revival", "reviv"),
                ("allowance", "allow"),
                ("inference", "infer"),
                ("airliner", "airlin"),
                ("gyroscopic", "gyroscop"),
                ("adjustable", "adjust"),
                ("defensible", "defens"),
                ("irritant", "irrit"),
                ("replacement", "replac"),
                ("adjustment", "adjust"),
                ("dependent", "depend"),
                ("adoption", "adopt"),
                ("homologou", "homolog"),
                ("communism", "commun"),
                ("activate", "activ"),
                ("angulariti", "angular"),
                ("homologous", "homolog"),
                ("effective", "effect"),
                ("bowdlerize", "bowdler"),
            ],
        );
    }

    #[test]
    fn step5_vectors() {
        check_step(
            Word::step5a,
            &[("probate", "probat"), ("rate", "rate"), ("cease", "ceas")],
        );
        check_step(Word::step5b, &[("controll", "control"), ("roll", "roll")]);
    }

    #[test]
    fn measure_examples() {
        for (w, m) in [
            ("tr", 0),
            ("ee", 0),
            ("tree", 0),
            ("y", 0),
            ("by", 0),
            ("trouble", 1),
            ("oats", 1),
            ("trees", 1),
            ("ivy", 1),
            ("troubles", 2),
            ("private", 2),
            ("oaten", 2),
            ("orrery", 2),
        ] {
            assert_eq!(Word::measure(w.as_bytes(), w.len()), m, "{w}");
        }
    }

    #[test]
    fn passes_through_non_letters() {
        assert_eq!(stem("gcn"), "gcn");
        assert_eq!(stem("2010"), "2010");
        assert_eq!(stem(""), "");
        assert_eq!(stem("café"), "café");
    }
}
