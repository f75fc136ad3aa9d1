#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace shmpi {

/// Every failure the runtime can report. One enum for all modules so that
/// callers (and tests) can switch on a single code.
enum class Errc {
  // segment
  NameInUse,
  SizeTooSmall,
  InvalidConfig,
  NoSuchSegment,
  RankOutOfRange,
  AlreadyAttached,
  NotReady,
  OutOfBounds,
  NullOffset,
  SystemError,
  // shm_alloc
  OutOfSharedMemory,
  NoSuchRegion,
  RegionFreed,
  UnderflowDetected,
  // msgqueue
  QueueFull,
  InvalidHandle,
  // sync
  Timeout,
  NotOwner,
  // mpi_core
  AlreadyInitialized,
  NotInitialized,
  FinalizeWithPending,
  PeerOutOfRange,
  TruncationError,
  MismatchedCounts,
  ContractViolation,
  InvalidRequest,
  // bench
  ValidationFailed,
  // launcher
  SpawnFailed,
  RankCrashed,
  JobTimeout,
  MissingRankMetrics,
  SchemaMismatch,
};

constexpr std::string_view to_string(Errc e) noexcept {
  switch (e) {
    case Errc::NameInUse: return "NameInUse";
    case Errc::SizeTooSmall: return "SizeTooSmall";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::NoSuchSegment: return "NoSuchSegment";
    case Errc::RankOutOfRange: return "RankOutOfRange";
    case Errc::AlreadyAttached: return "AlreadyAttached";
    case Errc::NotReady: return "NotReady";
    case Errc::OutOfBounds: return "OutOfBounds";
    case Errc::NullOffset: return "NullOffset";
    case Errc::SystemError: return "SystemError";
    case Errc::OutOfSharedMemory: return "OutOfSharedMemory";
    case Errc::NoSuchRegion: return "NoSuchRegion";
    case Errc::RegionFreed: return "RegionFreed";
    case Errc::UnderflowDetected: return "UnderflowDetected";
    case Errc::QueueFull: return "QueueFull";
    case Errc::InvalidHandle: return "InvalidHandle";
    case Errc::Timeout: return "Timeout";
    case Errc::NotOwner: return "NotOwner";
    case Errc::AlreadyInitialized: return "AlreadyInitialized";
    case Errc::NotInitialized: return "NotInitialized";
    case Errc::FinalizeWithPending: return "FinalizeWithPending";
    case Errc::PeerOutOfRange: return "PeerOutOfRange";
    case Errc::TruncationError: return "TruncationError";
    case Errc::MismatchedCounts: return "MismatchedCounts";
    case Errc::ContractViolation: return "ContractViolation";
    case Errc::InvalidRequest: return "InvalidRequest";
    case Errc::ValidationFailed: return "ValidationFailed";
    case Errc::SpawnFailed: return "SpawnFailed";
    case Errc::RankCrashed: return "RankCrashed";
    case Errc::JobTimeout: return "JobTimeout";
    case Errc::MissingRankMetrics: return "MissingRankMetrics";
    case Errc::SchemaMismatch: return "SchemaMismatch";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Launcher failures that name a rank (RankCrashed, MissingRankMetrics).
class RankError : public Error {
 public:
  RankError(Errc code, int rank, int exit_code, const std::string& what)
      : Error(code, what), rank_(rank), exit_code_(exit_code) {}

  int rank() const noexcept { return rank_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  int rank_;
  int exit_code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace shmpi
