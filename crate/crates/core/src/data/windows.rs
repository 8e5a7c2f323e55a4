use super::{DataError, Result};

/// `W` consecutive actions centered on `center`. Slots hold record indices;
/// after mixing a slot may point at a record from another video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceWindow {
    pub slots: Vec<usize>,
    pub padded: Vec<bool>,
    /// Record index of the action being classified.
    pub center: usize,
}

impl SequenceWindow {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn center_slot(&self) -> usize {
        self.slots.len() / 2
    }
}

/// One window per action. Slots past either end of a video replicate the
/// nearest real action and are flagged as padding.
pub fn build_windows(videos: &[Vec<usize>], w: usize) -> Result<Vec<SequenceWindow>> {
    if w % 2 == 0 {
        return Err(DataError::EvenWindow(w));
    }
    let half = (w / 2) as isize;
    let mut out = Vec::with_capacity(videos.iter().map(Vec::len).sum());
    for (v, actions) in videos.iter().enumerate() {
        if actions.is_empty() {
            return Err(DataError::EmptyVideo(format!("#{v}")));
        }
        let last = actions.len() as isize - 1;
        for i in 0..actions.len() as isize {
            let (slots, padded) = (i - half..=i + half)
                .map(|j| (actions[j.clamp(0, last) as usize], j < 0 || j > last))
                .unzip();
            out.push(SequenceWindow {
                slots,
                padded,
                center: actions[i as usize],
            });
        }
    }
    Ok(out)
}
