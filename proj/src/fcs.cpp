#include "cytoset/fcs.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace cyto {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

long parse_offset(const std::vector<std::uint8_t>& bytes, std::size_t pos) {
  if (pos + 8 > bytes.size()) throw DataError("FCS: truncated header");
  std::string field(bytes.begin() + pos, bytes.begin() + pos + 8);
  field = trim(field);
  if (field.empty()) return 0;
  try {
    return std::stol(field);
  } catch (const std::exception&) {
    throw DataError("FCS: non-numeric header offset '" + field + "'");
  }
}

// TEXT segment: delimiter, then delimiter-separated key/value pairs.
// A doubled delimiter inside a token is an escaped literal delimiter.
std::map<std::string, std::string> parse_text(
    const std::vector<std::uint8_t>& bytes, long begin, long end) {
  if (begin <= 0 || end <= begin || end >= static_cast<long>(bytes.size()))
    throw DataError("FCS: TEXT segment offsets out of range");
  const char delim = static_cast<char>(bytes[begin]);
  std::vector<std::string> tokens;
  std::string cur;
  for (long i = begin + 1; i <= end; ++i) {
    const char ch = static_cast<char>(bytes[i]);
    if (ch == delim) {
      if (i + 1 <= end && static_cast<char>(bytes[i + 1]) == delim) {
        cur.push_back(delim);
        ++i;
      } else {
        tokens.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(ch);
    }
  }
  std::map<std::string, std::string> kv;
  for (std::size_t i = 0; i + 1 < tokens.size(); i += 2) {
    std::string key = trim(tokens[i]);
    std::transform(key.begin(), key.end(), key.begin(), ::toupper);
    kv[key] = tokens[i + 1];
  }
  return kv;
}

const std::string& require(const std::map<std::string, std::string>& kv,
                           const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw DataError("FCS: missing required keyword " + key);
  return it->second;
}

long require_long(const std::map<std::string, std::string>& kv,
                  const std::string& key) {
  try {
    return std::stol(trim(require(kv, key)));
  } catch (const DataError&) {
    throw;
  } catch (const std::exception&) {
    throw DataError("FCS: keyword " + key + " is not an integer");
  }
}

std::uint32_t read_word(const std::uint8_t* p, int bytes, bool big_endian) {
  std::uint32_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int shift = big_endian ? 8 * (bytes - 1 - i) : 8 * i;
    v |= std::uint32_t(p[i]) << shift;
  }
  return v;
}

void write_word(std::vector<std::uint8_t>& out, std::uint32_t v, int bytes,
                bool big_endian) {
  for (int i = 0; i < bytes; ++i) {
    const int shift = big_endian ? 8 * (bytes - 1 - i) : 8 * i;
    out.push_back(static_cast<std::uint8_t>(v >> shift));
  }
}

}  // namespace

int FcmSample::marker_index(const std::string& name) const {
  const std::string want = trim(name);
  for (std::size_t i = 0; i < markers.size(); ++i)
    if (trim(markers[i]) == want) return static_cast<int>(i);
  return -1;
}

void FcmSample::validate() const {
  if (markers.empty() || events.empty())
    throw DataError("sample " + sample_id + ": empty event matrix");
  if (events.size() % markers.size() != 0)
    throw DataError("sample " + sample_id +
                    ": event data not a multiple of the marker count");
  if (!labels.empty() &&
      labels.size() != static_cast<std::size_t>(n_events()))
    throw DataError("sample " + sample_id + ": label length " +
                    std::to_string(labels.size()) + " != event count " +
                    std::to_string(n_events()));
  for (std::size_t i = 0; i < markers.size(); ++i)
    for (std::size_t j = i + 1; j < markers.size(); ++j)
      if (trim(markers[i]) == trim(markers[j]))
        throw DataError("sample " + sample_id + ": duplicate marker name '" +
                        markers[i] + "'");
}

FcmSample parse_fcs(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 58) throw DataError("FCS: file too short for a header");
  const std::string version(bytes.begin(), bytes.begin() + 6);
  if (version != "FCS3.0" && version != "FCS3.1")
    throw DataError("FCS: unsupported version '" + version + "'");
  const long text_begin = parse_offset(bytes, 10);
  const long text_end = parse_offset(bytes, 18);
  long data_begin = parse_offset(bytes, 26);
  long data_end = parse_offset(bytes, 34);

  auto kv = parse_text(bytes, text_begin, text_end);
  if (data_begin == 0) data_begin = require_long(kv, "$BEGINDATA");
  if (data_end == 0) data_end = require_long(kv, "$ENDDATA");

  const long par = require_long(kv, "$PAR");
  const long tot = require_long(kv, "$TOT");
  if (par < 1 || tot < 1)
    throw DataError("FCS: $PAR and $TOT must be positive");
  const std::string datatype = trim(require(kv, "$DATATYPE"));
  const std::string byteord = trim(require(kv, "$BYTEORD"));
  bool big_endian;
  if (byteord == "1,2,3,4" || byteord == "1,2")
    big_endian = false;
  else if (byteord == "4,3,2,1" || byteord == "2,1")
    big_endian = true;
  else
    throw DataError("FCS: unsupported $BYTEORD '" + byteord + "'");

  FcmSample sample;
  std::vector<int> widths(par);
  for (long p = 1; p <= par; ++p) {
    const std::string idx = std::to_string(p);
    const std::string pnn = require(kv, "$P" + idx + "N");
    auto pns = kv.find("$P" + idx + "S");
    sample.markers.push_back(
        trim(pns != kv.end() && !trim(pns->second).empty() ? pns->second
                                                           : pnn));
    if (datatype == "F") {
      widths[p - 1] = 4;
    } else if (datatype == "I") {
      const long bits = require_long(kv, "$P" + idx + "B");
      if (bits != 16 && bits != 32)
        throw DataError("FCS: $P" + idx + "B=" + std::to_string(bits) +
                        " unsupported for $DATATYPE I (need 16 or 32)");
      widths[p - 1] = static_cast<int>(bits / 8);
    } else {
      throw DataError("FCS: unsupported $DATATYPE '" + datatype + "'");
    }
  }

  long row_bytes = 0;
  for (int w : widths) row_bytes += w;
  const long need = tot * row_bytes;
  if (data_begin <= 0 || data_end < data_begin ||
      data_end >= static_cast<long>(bytes.size()) ||
      data_end - data_begin + 1 != need)
    throw DataError("FCS: DATA segment holds " +
                    std::to_string(std::max(0L, data_end - data_begin + 1)) +
                    " bytes but $TOT=" + std::to_string(tot) + " x $PAR=" +
                    std::to_string(par) + " needs " + std::to_string(need));

  sample.events.reserve(tot * par);
  const std::uint8_t* p = bytes.data() + data_begin;
  for (long e = 0; e < tot; ++e) {
    for (long c = 0; c < par; ++c) {
      const std::uint32_t word = read_word(p, widths[c], big_endian);
      if (datatype == "F") {
        float v;
        std::memcpy(&v, &word, 4);
        sample.events.push_back(v);
      } else {
        sample.events.push_back(static_cast<float>(word));
      }
      p += widths[c];
    }
  }
  auto cyt = kv.find("$FIL");
  sample.sample_id = cyt != kv.end() ? trim(cyt->second) : "fcs-sample";
  sample.validate();
  return sample;
}

FcmSample parse_fcs_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("FCS: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  FcmSample s = parse_fcs(bytes);
  if (s.sample_id == "fcs-sample") {
    auto slash = path.find_last_of('/');
    s.sample_id = slash == std::string::npos ? path : path.substr(slash + 1);
  }
  return s;
}

std::vector<std::uint8_t> write_fcs(const FcmSample& sample,
                                    const FcsWriteOptions& opts) {
  sample.validate();
  const int par = sample.n_features();
  const int tot = sample.n_events();
  const int width = opts.datatype == 'F' ? 4 : opts.int_bits / 8;

  const char delim = '/';
  auto escape = [&](const std::string& s) {
    std::string out;
    for (char ch : s) {
      out.push_back(ch);
      if (ch == delim) out.push_back(delim);
    }
    return out;
  };
  std::ostringstream text;
  text << delim;
  auto put = [&](const std::string& k, const std::string& v) {
    text << escape(k) << delim << escape(v) << delim;
  };
  put("$PAR", std::to_string(par));
  put("$TOT", std::to_string(tot));
  put("$DATATYPE", std::string(1, opts.datatype));
  put("$BYTEORD", opts.big_endian ? "4,3,2,1" : "1,2,3,4");
  put("$MODE", "L");
  put("$FIL", sample.sample_id);
  for (int p = 0; p < par; ++p) {
    put("$P" + std::to_string(p + 1) + "N", sample.markers[p]);
    put("$P" + std::to_string(p + 1) + "B",
        std::to_string(opts.datatype == 'F' ? 32 : opts.int_bits));
    put("$P" + std::to_string(p + 1) + "E", "0,0");
    put("$P" + std::to_string(p + 1) + "R", "262144");
  }
  const std::string text_str = text.str();

  const long header_len = 58;
  const long text_begin = header_len;
  const long text_end = text_begin + static_cast<long>(text_str.size()) - 1;
  const long data_begin = text_end + 1;
  const long data_end = data_begin + long(tot) * par * width - 1;

  std::ostringstream header;
  header << (opts.fcs31 ? "FCS3.1" : "FCS3.0") << "    ";
  auto off = [&](long v) {
    std::ostringstream o;
    o.width(8);
    o << v;
    header << o.str();
  };
  off(text_begin);
  off(text_end);
  off(data_begin);
  off(data_end);
  off(0);
  off(0);

  std::vector<std::uint8_t> out;
  const std::string head = header.str();
  out.insert(out.end(), head.begin(), head.end());
  out.insert(out.end(), text_str.begin(), text_str.end());
  for (float v : sample.events) {
    std::uint32_t word;
    if (opts.datatype == 'F') {
      std::memcpy(&word, &v, 4);
    } else {
      word = static_cast<std::uint32_t>(std::max(0.0f, v));
    }
    write_word(out, word, width, opts.big_endian);
  }
  return out;
}

}  // namespace cyto
