/* One-shot echo client: connect, send a fixed message, read the echo,
 * close. Syscall sequence matches the harness kv-client. */
#include <arpa/inet.h>
#include <netinet/in.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <unistd.h>

int main(int argc, char** argv) {
  int port = argc > 1 ? atoi(argv[1]) : 7201;
  int fd = socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return 1;

  struct sockaddr_in addr;
  memset(&addr, 0, sizeof(addr));
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = inet_addr("127.0.0.1");
  addr.sin_port = htons((unsigned short)port);
  if (connect(fd, (struct sockaddr*)&addr, sizeof(addr)) < 0) return 1;

  const char msg[] = "0123456789abcdef0123456789abcdef";
  if (write(fd, msg, sizeof(msg) - 1) < 0) return 1;
  char buf[1024];
  read(fd, buf, sizeof(buf));
  close(fd);
  return 0;
}
