use crate::error::{Error, Result};

/// One curriculum stage: `epochs` epochs on subsequences of `seq_len`
/// tokens, `batch_size` rows per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Ordered stages under a constant number of tokens per batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Curriculum {
    stages: Vec<Stage>,
    tokens_per_batch: usize,
}

impl Curriculum {
    /// Builds stages from `(seq_len, epochs)` pairs. Batch sizes are
    /// `tokens_per_batch / seq_len`, rounded down with a warning when the
    /// length does not divide the budget.
    pub fn new(stages: &[(usize, usize)], tokens_per_batch: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("curriculum needs at least one stage"));
        }
        let mut out = Vec::with_capacity(stages.len());
        for &(seq_len, epochs) in stages {
            if seq_len < 2 {
                return Err(Error::config(format!("stage length {seq_len} is below 2")));
            }
            if epochs == 0 {
                return Err(Error::config("every stage needs at least one epoch"));
            }
            if seq_len > tokens_per_batch {
                return Err(Error::contract(format!(
                    "subsequence length {seq_len} exceeds {tokens_per_batch} tokens per batch"
                )));
            }
            if !tokens_per_batch.is_multiple_of(seq_len) {
                log::warn!(
                    "L={seq_len} does not divide {tokens_per_batch} tokens per batch; batch size rounded down to {}",
                    tokens_per_batch / seq_len
                );
            }
            out.push(Stage {
                seq_len,
                epochs,
                batch_size: tokens_per_batch / seq_len,
            });
        }
        Ok(Self {
            stages: out,
            tokens_per_batch,
        })
    }

    pub fn single(seq_len: usize, epochs: usize, tokens_per_batch: usize) -> Result<Self> {
        Self::new(&[(seq_len, epochs)], tokens_per_batch)
    }

    /// `initial_len` until epoch `switch_epoch`, then `final_len` for the
    /// remaining `total_epochs - switch_epoch` epochs.
    pub fn two_stage(
        initial_len: usize,
        switch_epoch: usize,
        final_len: usize,
        total_epochs: usize,
        tokens_per_batch: usize,
    ) -> Result<Self> {
        if switch_epoch >= total_epochs {
            return Err(Error::contract(format!(
                "switch epoch {switch_epoch} must come before the last epoch {total_epochs}"
            )));
        }
        Self::new(
            &[(initial_len, switch_epoch), (final_len, total_epochs - switch_epoch)],
            tokens_per_batch,
        )
    }

    /// Parses `L:epochs` pairs separated by commas, e.g. `128:50,3072:155`.
    pub fn parse(spec: &str, tokens_per_batch: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for part in spec.split(',') {
            let (l, e) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::config(format!("stage {part:?} is not L:epochs")))?;
            let l = l.trim().parse().map_err(|_| Error::config(format!("bad stage length {l:?}")))?;
            let e = e.trim().parse().map_err(|_| Error::config(format!("bad stage epochs {e:?}")))?;
            pairs.push((l, e));
        }
        Self::new(&pairs, tokens_per_batch)
    }

    pub fn render(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}:{}", s.seq_len, s.epochs))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.tokens_per_batch
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Stage index and stage for a 0-based epoch.
    pub fn stage_at(&self, epoch: usize) -> Option<(usize, &Stage)> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.epochs;
            if epoch < end {
                return Some((i, s));
            }
        }
        None
    }

    /// Longest subsequence length of any stage.
    pub fn max_seq_len(&self) -> usize {
        self.stages.iter().map(|s| s.seq_len).max().unwrap_or(0)
    }
}
