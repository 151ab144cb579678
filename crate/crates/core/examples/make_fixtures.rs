//! Write the procedural fixture dataset: `make_fixtures <dir> [size]`.

use std::path::PathBuf;

fn main() -> pyrstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "fixtures".into()));
    let size = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);
    pyrstyle::fixtures::write_dataset(&root, size, 2, 2)?;
    println!(
        "wrote {}/content and {}/style at {size}x{size}",
        root.display(),
        root.display()
    );
    Ok(())
}
