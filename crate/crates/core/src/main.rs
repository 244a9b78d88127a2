// SPDX-License-Identifier: Apache-2.0

fn main() -> std::process::ExitCode {
    pdsim::cli::main_from_env()
}
