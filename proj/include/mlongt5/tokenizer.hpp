#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mlongt5/common.hpp"

namespace mlongt5 {

using TokenId = int;

/// The three denoiser families of the pretraining mixture. Each has a
/// reserved mode token in every vocabulary.
enum class DenoiserKind { R, S, X };

inline char kind_letter(DenoiserKind k) {
  switch (k) {
    case DenoiserKind::R: return 'R';
    case DenoiserKind::S: return 'S';
    case DenoiserKind::X: return 'X';
  }
  return '?';
}

inline DenoiserKind parse_kind(std::string_view s) {
  if (s == "R") return DenoiserKind::R;
  if (s == "S") return DenoiserKind::S;
  if (s == "X") return DenoiserKind::X;
  throw InputError("unknown denoiser kind '" + std::string(s) + "'");
}

/// Token id space shared by every vocabulary:
///
///   0 pad, 1 eos, 2 unk, 3..5 mode tokens [R] [S] [X],
///   6 .. size-101  content ids (bytes or pieces),
///   size-100 .. size-1  sentinels, sentinel k at size-1-k.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kReservedCount = 6;
  static constexpr int kSentinelCount = 100;
  static constexpr TokenId kByteBase = kReservedCount;

  /// 6 reserved + 256 bytes + 100 sentinels.
  static Vocab bytes() {
    Vocab v;
    v.size_ = kReservedCount + 256 + kSentinelCount;
    return v;
  }

  /// Loads a `piece<TAB>id` table. Ids must be dense starting at 6; the
  /// vocabulary size is the number of pieces plus reserved and sentinel ids.
  static Vocab load_pieces(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open piece vocabulary '" + path + "'");
    return parse_pieces(in, path);
  }

  static Vocab parse_pieces(std::istream& in, const std::string& origin = "<stream>") {
    Vocab v;
    v.byte_level_ = false;
    std::map<TokenId, std::string> by_id;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.rfind('\t');
      const auto where = origin + ":" + std::to_string(line_no) + ": ";
      if (tab == std::string::npos || tab == 0) throw InputError(where + "expected 'piece<TAB>id'");
      std::string piece = line.substr(0, tab);
      TokenId id;
      try {
        std::size_t used = 0;
        id = std::stoi(line.substr(tab + 1), &used);
        if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw InputError(where + "invalid id '" + line.substr(tab + 1) + "'");
      }
      if (!utf8::valid(piece)) throw InputError(where + "piece is not valid UTF-8");
      if (id < kReservedCount) throw InputError(where + "id " + std::to_string(id) + " collides with reserved ids");
      if (v.pieces_.contains(piece)) throw InputError(where + "duplicate piece '" + piece + "'");
      if (by_id.contains(id)) throw InputError(where + "duplicate id " + std::to_string(id));
      v.pieces_.emplace(piece, id);
      by_id.emplace(id, std::move(piece));
    }
    TokenId expected = kReservedCount;
    for (const auto& [id, piece] : by_id) {
      if (id != expected) {
        throw InputError(origin + ": piece ids are not dense (expected " + std::to_string(expected) +
                         ", found " + std::to_string(id) + ")");
      }
      ++expected;
    }
    v.size_ = expected + kSentinelCount;
    v.id_to_piece_.reserve(by_id.size());
    for (auto& [id, piece] : by_id) {
      v.max_piece_bytes_ = std::max(v.max_piece_bytes_, piece.size());
      v.id_to_piece_.push_back(std::move(piece));
    }
    return v;
  }

  int size() const { return size_; }
  bool byte_level() const { return byte_level_; }

  TokenId mode_id(DenoiserKind k) const {
    switch (k) {
      case DenoiserKind::R: return 3;
      case DenoiserKind::S: return 4;
      case DenoiserKind::X: return 5;
    }
    return kUnk;
  }

  TokenId sentinel(int k) const {
    if (k < 0 || k >= kSentinelCount) throw Error("sentinel index " + std::to_string(k) + " out of range");
    return size_ - 1 - k;
  }
  bool is_sentinel(TokenId id) const { return id >= size_ - kSentinelCount && id < size_; }
  int sentinel_index(TokenId id) const { return size_ - 1 - id; }
  bool is_mode(TokenId id) const { return id >= 3 && id < kReservedCount; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    if (byte_level_) {
      out.reserve(text.size());
      for (unsigned char c : text) out.push_back(kByteBase + c);
      return out;
    }
    greedy(text, [&](std::size_t, std::size_t, TokenId id) { out.push_back(id); });
    return out;
  }

  /// Surface strings of the segmentation `encode` would produce. Byte
  /// vocabularies segment per code point.
  std::vector<std::string> encode_pieces(std::string_view text) const {
    std::vector<std::string> out;
    if (byte_level_) {
      std::size_t pos = 0;
      while (pos < text.size()) {
        const std::size_t start = pos;
        utf8::decode_one(text, pos);
        out.emplace_back(text.substr(start, pos - start));
      }
      return out;
    }
    greedy(text, [&](std::size_t begin, std::size_t len, TokenId) { out.emplace_back(text.substr(begin, len)); });
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || id >= size_) {
        throw InputError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                         std::to_string(size_));
      }
      if (id == kPad || id == kEos) continue;
      if (id == kUnk) {
        out += "<unk>";
      } else if (id == 3) {
        out += "[R]";
      } else if (id == 4) {
        out += "[S]";
      } else if (id == 5) {
        out += "[X]";
      } else if (is_sentinel(id)) {
        out += "<extra_id_" + std::to_string(sentinel_index(id)) + ">";
      } else if (byte_level_) {
        out.push_back(static_cast<char>(id - kByteBase));
      } else {
        out += id_to_piece_[static_cast<std::size_t>(id - kReservedCount)];
      }
    }
    return out;
  }

 private:
  Vocab() = default;

  template <class Emit>
  void greedy(std::string_view text, Emit&& emit) const {
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t len = std::min(max_piece_bytes_, text.size() - pos);
      bool matched = false;
      for (; len > 0; --len) {
        auto it = pieces_.find(std::string(text.substr(pos, len)));
        if (it != pieces_.end()) {
          emit(pos, len, it->second);
          pos += len;
          matched = true;
          break;
        }
      }
      if (!matched) {
        const std::size_t start = pos;
        utf8::decode_one(text, pos);
        emit(start, pos - start, kUnk);
      }
    }
  }

  int size_ = 0;
  bool byte_level_ = true;
  std::unordered_map<std::string, TokenId> pieces_;
  std::vector<std::string> id_to_piece_;
  std::size_t max_piece_bytes_ = 0;
};

inline Vocab byte_vocab() { return Vocab::bytes(); }
inline Vocab load_piece_vocab(const std::string& path) { return Vocab::load_pieces(path); }

}  // namespace mlongt5
