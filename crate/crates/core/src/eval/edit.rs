/// Unit-cost Levenshtein distance (substitution, insertion, deletion).
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Characters with surrounding whitespace removed and inner runs collapsed
/// to one space, which counts as a character.
pub fn chars(s: &str) -> Vec<char> {
    words(s).join(" ").chars().collect()
}
