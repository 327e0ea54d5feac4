#include "hbtrace/errors.hpp"

namespace hbt {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::MismatchedPhase: return "MismatchedPhase";
    case Errc::SameThread: return "SameThread";
    case Errc::WouldCreateCycle: return "WouldCreateCycle";
    case Errc::UnknownCoord: return "UnknownCoord";
    case Errc::TraceFinalized: return "TraceFinalized";
    case Errc::TraceNotFinalized: return "TraceNotFinalized";
    case Errc::FormatVersionMismatch: return "FormatVersionMismatch";
    case Errc::CorruptRecord: return "CorruptRecord";
    case Errc::UnknownStream: return "UnknownStream";
    case Errc::ReadAheadOfWrites: return "ReadAheadOfWrites";
    case Errc::UnknownRun: return "UnknownRun";
    case Errc::EmptyLibrary: return "EmptyLibrary";
    case Errc::AmbiguousFollow: return "AmbiguousFollow";
    case Errc::UnsupportedSyscallForErrno: return "UnsupportedSyscallForErrno";
    case Errc::MalformedRule: return "MalformedRule";
    case Errc::BackendUnsupported: return "BackendUnsupported";
    case Errc::ConfigError: return "ConfigError";
    case Errc::BoundExceeded: return "BoundExceeded";
    case Errc::QuiescenceWithRunnableWork: return "QuiescenceWithRunnableWork";
    case Errc::AttachDenied: return "AttachDenied";
    case Errc::TraceeDied: return "TraceeDied";
    case Errc::InjectionFailed: return "InjectionFailed";
  }
  return "Unknown";
}

Error::Error(Errc code, std::string what)
    : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

void raise(Errc code, std::string what) { throw Error(code, std::move(what)); }

}  // namespace hbt
