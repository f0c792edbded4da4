//! Pass/fail bookkeeping for the acceptance run in `tests/acceptance.rs`.

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

#[derive(Default)]
pub struct Tally {
    results: Vec<bool>,
}

impl Tally {
    /// Prints one `[PASS]`/`[FAIL]` line and records the result.
    pub fn record(&mut self, id: u32, name: &str, o: Outcome) {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] C{id} {name}: {}", o.detail);
        self.results.push(o.pass);
    }

    pub fn failed(&self) -> usize {
        self.results.iter().filter(|p| !**p).count()
    }

    pub fn summary(&self) -> String {
        format!("acceptance: {} passed, {} failed", self.results.len() - self.failed(), self.failed())
    }
}
