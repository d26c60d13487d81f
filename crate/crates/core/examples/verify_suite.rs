//! Runs the built-in oracle, gradient and invariant checks.

fn main() {
    let checks = stylepro::verify::run_suite(|c| eprintln!("{} ... {}", c.name, if c.passed { "ok" } else { "FAILED" }));
    print!("{}", stylepro::verify::format_table(&checks));
}
