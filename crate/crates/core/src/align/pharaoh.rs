//! Pharaoh alignment text: one sentence pair per line, links as `i-j`.

use std::fs;
use std::path::Path;

use super::Link;
use crate::error::{Error, Result};

pub fn format_line(links: &[Link]) -> String {
    links
        .iter()
        .map(|(i, j)| format!("{i}-{j}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_line(line: &str) -> std::result::Result<Vec<Link>, String> {
    line.split_whitespace()
        .map(|tok| {
            let (a, b) = tok.split_once('-').ok_or_else(|| format!("bad link {tok:?}"))?;
            let i = a.parse().map_err(|_| format!("bad source index in {tok:?}"))?;
            let j = b.parse().map_err(|_| format!("bad target index in {tok:?}"))?;
            Ok((i, j))
        })
        .collect()
}

pub fn write(path: &Path, sentences: &[Vec<Link>]) -> Result<()> {
    let mut s = String::new();
    for links in sentences {
        s.push_str(&format_line(links));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Vec<Link>>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| {
            parse_line(l).map_err(|msg| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format() {
        let links = vec![(0, 0), (1, 2), (2, 1)];
        assert_eq!(format_line(&links), "0-0 1-2 2-1");
        assert_eq!(parse_line("0-0 1-2  2-1").unwrap(), links);
        assert_eq!(parse_line("").unwrap(), vec![]);
        assert!(parse_line("0_1").is_err());
    }
}
