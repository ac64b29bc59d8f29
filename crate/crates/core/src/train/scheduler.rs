/// Reduce-on-plateau learning-rate rule driven by validation PSNR.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub min_lr: f64,
    pub patience: u32,
    /// A metric must beat the best by more than this to count as improvement.
    pub min_delta: f64,
    pub best: Option<f64>,
    pub epochs_since_improve: u32,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, min_lr: f64, patience: u32) -> Self {
        PlateauScheduler {
            lr: lr.max(min_lr),
            factor,
            min_lr,
            patience,
            min_delta: 0.0,
            best: None,
            epochs_since_improve: 0,
        }
    }

    pub fn with_min_delta(mut self, min_delta: f64) -> Self {
        self.min_delta = min_delta;
        self
    }

    /// Records one epoch's metric and returns the learning rate for the next.
    /// Only a value greater than `best + min_delta` counts as improvement. Once the count of
    /// non-improving epochs exceeds `patience` the rate is cut (never below
    /// `min_lr`) and the count restarts.
    pub fn step(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|b| metric > b + self.min_delta) {
            self.best = Some(metric);
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
        }
        if self.epochs_since_improve > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.epochs_since_improve = 0;
        }
        self.lr
    }

    pub fn at_floor(&self) -> bool {
        self.lr <= self.min_lr
    }
}
