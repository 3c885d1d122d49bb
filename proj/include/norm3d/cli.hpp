#pragma once

namespace norm3d {

/// Entry point of the command-line tool; returns the process exit code.
/// Subcommands: bench, gradcheck, synth, predict.
int cli_main(int argc, const char* const* argv);

}  // namespace norm3d
