use std::process::Command;

fn main() {
    let desc = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    println!("cargo:rustc-env=TURBMIT_GIT_DESCRIBE={desc}");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
