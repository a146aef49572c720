/// Multiplies the learning rate by `factor` once the training loss has gone
/// `patience` consecutive epochs without strictly beating its best value.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
    decays: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        assert!(factor > 0.0 && factor < 1.0, "plateau factor must lie in (0, 1)");
        assert!(patience >= 1, "plateau patience must be at least 1");
        Self {
            lr,
            factor,
            patience,
            best: None,
            stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Records one epoch's training loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if !(loss < best) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.decays += 1;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Tracks the best validation MRR and signals a stop after `patience`
/// evaluations in a row fail to beat it.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "early-stop patience must be at least 1");
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, mrr: f64) -> StopSignal {
        match self.best {
            Some(best) if !(mrr > best) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopSignal::Stop
                } else {
                    StopSignal::Continue
                }
            }
            _ => {
                self.best = Some(mrr);
                self.stale = 0;
                StopSignal::Improved
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(losses: &[f64]) -> f64 {
        let mut s = PlateauScheduler::new(0.003, 0.8, 5);
        losses.iter().fold(0.003, |_, &l| s.step(l))
    }

    #[test]
    fn decreasing_loss_keeps_lr() {
        let losses: Vec<f64> = (0..30).map(|i| 10.0 - i as f64 * 0.1).collect();
        assert_eq!(run(&losses), 0.003);
    }

    #[test]
    fn five_flat_epochs_decay_once() {
        assert!((run(&[1.0; 6]) - 0.0024).abs() < 1e-15);
        assert_eq!(run(&[1.0; 5]), 0.003);
    }

    #[test]
    fn ten_flat_epochs_decay_twice() {
        assert!((run(&[1.0; 11]) - 0.00192).abs() < 1e-15);
    }

    #[test]
    fn improvement_resets_the_counter() {
        assert_eq!(run(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.9, 0.9, 0.9, 0.9, 0.9]), 0.003);
    }

    #[test]
    fn early_stopping_counts_stale_evals() {
        let mut e = EarlyStopping::new(3);
        assert_eq!(e.observe(0.2), StopSignal::Improved);
        assert_eq!(e.observe(0.2), StopSignal::Continue);
        assert_eq!(e.observe(0.3), StopSignal::Improved);
        assert_eq!(e.observe(0.1), StopSignal::Continue);
        assert_eq!(e.observe(0.3), StopSignal::Continue);
        assert_eq!(e.observe(0.25), StopSignal::Stop);
        assert_eq!(e.best(), Some(0.3));
    }
}
