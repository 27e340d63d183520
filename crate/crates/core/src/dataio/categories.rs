use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ImageRecord, Subtlety};

/// Training subsets that progressively drop the hardest subtlety grades.
///
/// | label | grades kept                                    |
/// |-------|------------------------------------------------|
/// | A     | all five                                       |
/// | B     | all but extremely subtle                       |
/// | C     | obvious, relatively obvious, subtle            |
/// | D     | obvious, relatively obvious                    |
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum SubtletyCategory {
    #[default]
    A,
    B,
    C,
    D,
}

impl SubtletyCategory {
    pub const ALL: [SubtletyCategory; 4] = [
        SubtletyCategory::A,
        SubtletyCategory::B,
        SubtletyCategory::C,
        SubtletyCategory::D,
    ];

    pub fn included_subtleties(self) -> BTreeSet<Subtlety> {
        let keep = match self {
            SubtletyCategory::A => 5,
            SubtletyCategory::B => 4,
            SubtletyCategory::C => 3,
            SubtletyCategory::D => 2,
        };
        Subtlety::ALL[..keep].iter().copied().collect()
    }

    pub fn includes(self, s: Subtlety) -> bool {
        self.included_subtleties().contains(&s)
    }

    pub fn label(self) -> &'static str {
        match self {
            SubtletyCategory::A => "A",
            SubtletyCategory::B => "B",
            SubtletyCategory::C => "C",
            SubtletyCategory::D => "D",
        }
    }
}

/// Keeps records whose annotated subtlety belongs to `cat`. Records without
/// an annotation or without a subtlety grade are dropped.
pub fn filter_by_category(records: Vec<ImageRecord>, cat: SubtletyCategory) -> Vec<ImageRecord> {
    let included = cat.included_subtleties();
    records
        .into_iter()
        .filter(|r| {
            r.annotation
                .as_ref()
                .and_then(|a| a.subtlety)
                .is_some_and(|s| included.contains(&s))
        })
        .collect()
}
