#pragma once

#include <stdexcept>
#include <string>

namespace hbt {

enum class Errc {
  // trace building
  MismatchedPhase,
  SameThread,
  WouldCreateCycle,
  UnknownCoord,
  TraceFinalized,
  TraceNotFinalized,
  // serialization
  FormatVersionMismatch,
  CorruptRecord,
  // stream tracking
  UnknownStream,
  ReadAheadOfWrites,
  // run library
  UnknownRun,
  EmptyLibrary,
  AmbiguousFollow,
  // fault specs
  UnsupportedSyscallForErrno,
  MalformedRule,
  BackendUnsupported,
  // simulation / config
  ConfigError,
  BoundExceeded,
  QuiescenceWithRunnableWork,
  // live tracing
  AttachDenied,
  TraceeDied,
  InjectionFailed,
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string what);
  Errc code() const { return code_; }

  // CorruptRecord carries the offending record index (0-based event record,
  // -1 for the header).
  long record_index = -2;

 private:
  Errc code_;
};

[[noreturn]] void raise(Errc code, std::string what);

}  // namespace hbt
