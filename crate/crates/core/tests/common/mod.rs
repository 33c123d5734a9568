use std::io::Write;

/// One summary line per acceptance criterion. Written to the stdout handle
/// directly so the line survives the test harness's output capture.
pub fn report(name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" }).unwrap();
    out.flush().unwrap();
}

/// Progress detail under a criterion, also uncaptured.
pub fn note(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "  {line}").unwrap();
    out.flush().unwrap();
}
