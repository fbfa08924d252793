#include "image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "errors.hpp"

namespace pbflow {

namespace {

// Next whitespace-delimited header token, treating '#' comments as
// whitespace per the PGM grammar.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

long parse_positive(const std::string& tok, const char* what) {
  if (tok.empty()) throw IoError(std::string("pgm file: missing ") + what);
  for (char c : tok)
    if (!std::isdigit(static_cast<unsigned char>(c)))
      throw IoError(std::string("pgm file: malformed ") + what);
  const long v = std::stol(tok);
  if (v < 1) throw IoError(std::string("pgm file: non-positive ") + what);
  return v;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("pgm file: cannot open " + path);

  if (next_token(in) != "P5") throw IoError("pgm file: not a binary PGM: " + path);
  const long w = parse_positive(next_token(in), "width");
  const long h = parse_positive(next_token(in), "height");
  const long maxval = parse_positive(next_token(in), "maxval");
  if (maxval > 65535) throw IoError("pgm file: maxval out of range");
  // The single whitespace byte after maxval was consumed by next_token.

  const bool wide = maxval > 255;
  Tensor image({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::string raw(n * (wide ? 2 : 1), '\0');
  if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size())))
    throw IoError("pgm file: truncated pixel data in " + path);
  if (in.get() != EOF) throw IoError("pgm file: trailing bytes in " + path);

  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  for (std::size_t i = 0; i < n; ++i) {
    const long v = wide ? (static_cast<long>(bytes[2 * i]) << 8) | bytes[2 * i + 1]
                        : bytes[i];
    if (v > maxval) throw IoError("pgm file: sample exceeds maxval in " + path);
    image.data()[i] = static_cast<double>(v);
  }
  return image;
}

void write_pgm(const Tensor& image, const std::string& path) {
  if (image.rank() != 2)
    throw DimensionError("pgm file: image must be rank-2 [H, W]");
  const std::size_t h = image.dim(0), w = image.dim(1);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("pgm file: cannot open " + tmp + " for writing");
    out << "P5\n" << w << " " << h << "\n255\n";
    for (double v : image.values()) {
      const double c = std::isfinite(v) ? std::clamp(v, 0.0, 255.0) : 0.0;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c))));
    }
    if (!out) throw IoError("pgm file: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("pgm file: cannot move " + tmp + " into place");
}

}  // namespace pbflow
